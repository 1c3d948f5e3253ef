use super::model::{ConvBn, MultiExitNetwork, ResBlock};
use crate::error::{Error, Result};
use crate::tensor::{conv_output_size, Real};

/// Multiply-accumulates of a convolution: `C_in · C_out · K² · H_out · W_out`.
pub fn conv_macs(cin: usize, cout: usize, kernel: usize, out_h: usize, out_w: usize) -> u64 {
    (cin * cout * kernel * kernel * out_h * out_w) as u64
}

/// Multiply-accumulates of a fully-connected layer: `in · out`.
pub fn linear_macs(inputs: usize, outputs: usize) -> u64 {
    (inputs * outputs) as u64
}

struct Cursor<'a, T> {
    net: &'a MultiExitNetwork<T>,
    channels: usize,
    h: usize,
    w: usize,
    macs: u64,
}

impl<T: Real> Cursor<'_, T> {
    fn conv(&mut self, cb: &ConvBn, cin: usize) -> Result<(usize, usize, usize)> {
        let shape = self.net.params().peek(cb.conv).shape();
        let (cout, k) = (shape[0], shape[2]);
        let out = |n| {
            conv_output_size(n, k, cb.stride, cb.padding)
                .ok_or_else(|| Error::shape(format!("kernel {k} does not fit input {n}")))
        };
        let (oh, ow) = (out(self.h)?, out(self.w)?);
        self.macs += conv_macs(cin, cout, k, oh, ow);
        Ok((cout, oh, ow))
    }

    fn stem(&mut self) -> Result<()> {
        let (c, h, w) = self.conv(&self.net.stem, self.channels)?;
        (self.channels, self.h, self.w) = (c, h, w);
        Ok(())
    }

    fn block(&mut self, b: &ResBlock) -> Result<()> {
        let cin = self.channels;
        let (c1, h1, w1) = self.conv(&b.conv1, cin)?;
        let (h0, w0) = (self.h, self.w);
        (self.h, self.w) = (h1, w1);
        let (c2, _, _) = self.conv(&b.conv2, c1)?;
        if let Some(sc) = &b.shortcut {
            (self.h, self.w) = (h0, w0);
            self.conv(sc, cin)?;
        }
        (self.channels, self.h, self.w) = (c2, h1, w1);
        Ok(())
    }
}

impl<T: Real> MultiExitNetwork<T> {
    /// Multiply-accumulate count of [`MultiExitNetwork::forward_prefix`] for
    /// one `height x width` input: every conv and fully-connected layer on
    /// the path to classifier `exit`. Normalization, activation and pooling
    /// are not counted.
    pub fn count_flops(&self, exit: usize, height: usize, width: usize) -> Result<u64> {
        let mut cur = self.trunk(self.exit_group(exit)?, height, width)?;
        if exit < self.num_exits() {
            for b in &self.branches[exit - 1].blocks {
                cur.block(b)?;
            }
        }
        cur.macs += linear_macs(cur.channels, self.num_classes());
        Ok(cur.macs)
    }

    /// MACs actually spent by an incremental pass that stops at `exit`: the
    /// path to `exit` plus every shallower branch evaluated and passed over.
    pub fn incurred_flops(&self, exit: usize, height: usize, width: usize) -> Result<u64> {
        let mut total = self.count_flops(exit, height, width)?;
        for earlier in 1..exit {
            let trunk = self.trunk(self.exit_group(earlier)?, height, width)?.macs;
            total += self.count_flops(earlier, height, width)? - trunk;
        }
        Ok(total)
    }

    fn trunk(&self, groups: usize, height: usize, width: usize) -> Result<Cursor<'_, T>> {
        let mut cur = Cursor {
            net: self,
            channels: self.backbone().in_channels,
            h: height,
            w: width,
            macs: 0,
        };
        cur.stem()?;
        for blocks in &self.groups[..groups] {
            for b in blocks {
                cur.block(b)?;
            }
        }
        Ok(cur)
    }

    /// MAC count of every exit, shallow to deep.
    pub fn exit_costs(&self, height: usize, width: usize) -> Result<Vec<u64>> {
        (1..=self.num_exits())
            .map(|n| self.count_flops(n, height, width))
            .collect()
    }
}
