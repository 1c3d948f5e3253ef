//! Attaches sampled branches to a ResNet18-shaped backbone and prints each
//! exit's blocks and cost on 32x32 inputs.

use multiexit::network::{BackboneSpec, MultiExitNetwork};
use multiexit::Result;

fn main() -> Result<()> {
    let backbone = BackboneSpec::resnet18(100);
    let net = MultiExitNetwork::<f32>::build_backbone(&backbone, 1)?.augment_with_branches(&[1, 2, 3], 2)?;
    let full = net.count_flops(net.num_exits(), 32, 32)?;
    for (i, b) in net.branch_specs().iter().enumerate() {
        let blocks: Vec<String> = b.sampled_blocks.iter().map(|s| format!("{}/s{}", s.out_channels, s.stride)).collect();
        let macs = net.count_flops(i + 1, 32, 32)?;
        println!(
            "exit {} after group {}: blocks [{}], {macs} MACs ({:.1}% of full)",
            i + 1,
            b.attach_after_group,
            blocks.join(", "),
            100.0 * macs as f64 / full as f64
        );
    }
    println!("exit {} (backbone head): {full} MACs", net.num_exits());
    println!("{} parameters, feature length {}", net.params().num_scalars(), net.feature_len());
    Ok(())
}
