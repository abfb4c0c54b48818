//! Closed-form recount of the ResNet bottleneck and single-branch HRNet
//! chains, written directly from the layer tables without the IR.

pub struct Recount {
    pub params: u64,
    pub macs: u64,
    /// MACs of stem, stage1..stage4.
    pub stage_macs: Vec<u64>,
}

impl Recount {
    pub fn shares(&self) -> Vec<f64> {
        self.stage_macs
            .iter()
            .map(|&m| m as f64 / self.macs as f64)
            .collect()
    }
}

/// Same-padded conv followed by a norm layer: (params, macs, h_out, w_out).
fn conv(cin: u64, cout: u64, k: u64, s: u64, h: u64, w: u64) -> (u64, u64, u64, u64) {
    let p = k / 2;
    let ho = (h + 2 * p - k) / s + 1;
    let wo = (w + 2 * p - k) / s + 1;
    (
        cin * cout * k * k + 2 * cout,
        cin * cout * k * k * ho * wo,
        ho,
        wo,
    )
}

fn pool(h: u64, w: u64) -> (u64, u64) {
    ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1)
}

pub enum StemOp {
    Conv { k: u64, cout: u64, s: u64 },
    Pool,
}

pub fn resnet(stem: &[StemOp], repeats: [u64; 4], strides: [u64; 4], h: u64, w: u64) -> Recount {
    let (mut h, mut w, mut c) = (h, w, 3u64);
    let mut params = 0;
    let mut stage_macs = vec![0u64];
    for op in stem {
        match *op {
            StemOp::Pool => (h, w) = pool(h, w),
            StemOp::Conv { k, cout, s } => {
                let (p, m, ho, wo) = conv(c, cout, k, s, h, w);
                params += p;
                stage_macs[0] += m;
                (h, w, c) = (ho, wo, cout);
            }
        }
    }
    for i in 0..4 {
        let mid = 64u64 << i;
        let out = mid * 4;
        let mut sm = 0;
        for b in 0..repeats[i] {
            let s = if b == 0 { strides[i] } else { 1 };
            let (p1, m1, h1, w1) = conv(c, mid, 1, 1, h, w);
            let (p2, m2, h2, w2) = conv(mid, mid, 3, s, h1, w1);
            let (p3, m3, h3, w3) = conv(mid, out, 1, 1, h2, w2);
            params += p1 + p2 + p3;
            sm += m1 + m2 + m3;
            if b == 0 && (c != out || s > 1) {
                // 1x1 strided projection: out = (h - 1) / s + 1
                let (ph, pw) = ((h - 1) / s + 1, (w - 1) / s + 1);
                params += c * out + 2 * out;
                sm += c * out * ph * pw;
            }
            (c, h, w) = (out, h3, w3);
        }
        stage_macs.push(sm);
    }
    Recount {
        params,
        macs: stage_macs.iter().sum(),
        stage_macs,
    }
}

pub fn resnet50(h: u64, w: u64) -> Recount {
    resnet(
        &[
            StemOp::Conv {
                k: 7,
                cout: 64,
                s: 2,
            },
            StemOp::Pool,
        ],
        [3, 4, 6, 3],
        [1, 2, 2, 2],
        h,
        w,
    )
}

pub fn bh_resnet50_with(repeats: [u64; 4], h: u64, w: u64) -> Recount {
    resnet(
        &[
            StemOp::Conv {
                k: 3,
                cout: 64,
                s: 1,
            },
            StemOp::Pool,
        ],
        repeats,
        [2, 2, 2, 2],
        h,
        w,
    )
}

/// Basic-block chain with every stage at the stem's resolution.
pub fn hrnet(stem: &[StemOp], widths: [u64; 4], repeats: [u64; 4], h: u64, w: u64) -> Recount {
    let (mut h, mut w, mut c) = (h, w, 3u64);
    let mut params = 0;
    let mut stage_macs = vec![0u64];
    for op in stem {
        match *op {
            StemOp::Pool => (h, w) = pool(h, w),
            StemOp::Conv { k, cout, s } => {
                let (p, m, ho, wo) = conv(c, cout, k, s, h, w);
                params += p;
                stage_macs[0] += m;
                (h, w, c) = (ho, wo, cout);
            }
        }
    }
    for i in 0..4 {
        let wd = widths[i];
        let mut sm = 0;
        for b in 0..repeats[i] {
            let (p1, m1, _, _) = conv(c, wd, 3, 1, h, w);
            let (p2, m2, _, _) = conv(wd, wd, 3, 1, h, w);
            params += p1 + p2;
            sm += m1 + m2;
            if b == 0 && c != wd {
                params += c * wd + 2 * wd;
                sm += c * wd * h * w;
            }
            c = wd;
        }
        stage_macs.push(sm);
    }
    Recount {
        params,
        macs: stage_macs.iter().sum(),
        stage_macs,
    }
}
