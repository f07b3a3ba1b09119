//! Brute-force reference for the token advantage pipeline.
//!
//! Written straight from the definitions with plain loops and no shared code
//! with the library, so agreement between the two is meaningful.

#[derive(Debug, Clone, Copy)]
pub struct OracleToken {
    pub logp_cur: f64,
    pub logp_ref: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct OracleResponse {
    pub tokens: Vec<OracleToken>,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct OracleParams {
    pub gamma: f64,
    pub lambda: f64,
    pub eta: f64,
    pub buckets: usize,
    pub theta: f64,
    pub delta: f64,
    pub eps: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            gamma: 5.0,
            lambda: 0.1,
            eta: 0.2,
            buckets: 10,
            theta: 0.5,
            delta: 1e-4,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OracleTokenOut {
    pub gate: f64,
    pub s: f64,
    pub s_anchored: f64,
    pub tau: f64,
    pub bucket: usize,
    pub z: f64,
    pub outcome: f64,
    pub progress: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct OracleOut {
    pub zero_variance: bool,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub entropy_mean: f64,
    pub entropy_std: f64,
    pub a_hat: Vec<f64>,
    pub anchors: Vec<f64>,
    pub tokens: Vec<Vec<OracleTokenOut>>,
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn oracle(group: &[OracleResponse], p: OracleParams) -> OracleOut {
    let g = group.len() as f64;

    // Outcome advantage with population std; identical rewards give zeros.
    let r0 = group[0].reward;
    let zero_variance = group.iter().all(|o| o.reward == r0);
    let mut r_sum = 0.0;
    for o in group {
        r_sum += o.reward;
    }
    let r_mean = if zero_variance { r0 } else { r_sum / g };
    let mut r_var = 0.0;
    for o in group {
        r_var += (o.reward - r_mean) * (o.reward - r_mean);
    }
    let r_std = if zero_variance {
        0.0
    } else {
        (r_var / g).sqrt()
    };
    let a_hat: Vec<f64> = group
        .iter()
        .map(|o| {
            if zero_variance {
                0.0
            } else {
                (o.reward - r_mean) / (r_std + p.delta)
            }
        })
        .collect();

    // Entropy statistics pooled over every token of every response.
    let mut all_h = Vec::new();
    for o in group {
        for t in &o.tokens {
            all_h.push(t.entropy);
        }
    }
    let h0 = all_h[0];
    let h_const = all_h.iter().all(|&h| h == h0);
    let n = all_h.len() as f64;
    let h_mean = if h_const {
        h0
    } else {
        all_h.iter().sum::<f64>() / n
    };
    let h_std = if h_const {
        0.0
    } else {
        (all_h
            .iter()
            .map(|h| (h - h_mean) * (h - h_mean))
            .sum::<f64>()
            / n)
            .sqrt()
    };

    let anchors: Vec<f64> = group
        .iter()
        .zip(&a_hat)
        .map(|(o, &a)| {
            if !zero_variance && a != 0.0 {
                sgn(a)
            } else {
                sgn(o.reward - p.theta)
            }
        })
        .collect();

    let mut tokens: Vec<Vec<OracleTokenOut>> = Vec::new();
    for (i, o) in group.iter().enumerate() {
        let total_h: f64 = o.tokens.iter().map(|t| t.entropy).sum();
        let len = o.tokens.len();
        let mut running = 0.0;
        let mut row = Vec::new();
        for (t, tok) in o.tokens.iter().enumerate() {
            running += tok.entropy;
            let tau = if total_h > 0.0 {
                running / total_h
            } else {
                (t + 1) as f64 / len as f64
            };
            let mut bucket = (tau * p.buckets as f64).floor() as usize;
            if bucket > p.buckets - 1 {
                bucket = p.buckets - 1;
            }
            let zg = p.gamma * (tok.entropy - h_mean) / (h_std + p.eps);
            let gate = 1.0 / (1.0 + (-zg).exp());
            let s = p.lambda * (tok.logp_cur - tok.logp_ref);
            row.push(OracleTokenOut {
                gate,
                s,
                s_anchored: anchors[i] * s,
                tau,
                bucket,
                outcome: gate * a_hat[i],
                ..Default::default()
            });
        }
        tokens.push(row);
    }

    // Z-score the anchored signal within each bucket, pooled over the group.
    for k in 0..p.buckets {
        let mut members = Vec::new();
        for (i, row) in tokens.iter().enumerate() {
            for (t, tok) in row.iter().enumerate() {
                if tok.bucket == k {
                    members.push((i, t, tok.s_anchored));
                }
            }
        }
        if members.len() < 2 {
            continue;
        }
        let first = members[0].2;
        if members.iter().all(|m| m.2 == first) {
            continue;
        }
        let m = members.len() as f64;
        let mu = members.iter().map(|x| x.2).sum::<f64>() / m;
        let sd = (members.iter().map(|x| (x.2 - mu) * (x.2 - mu)).sum::<f64>() / m).sqrt();
        for (i, t, v) in members {
            tokens[i][t].z = (v - mu) / (sd + p.eps);
        }
    }
    for row in &mut tokens {
        for tok in row {
            tok.progress = p.eta * tok.z;
            tok.total = tok.outcome + tok.progress;
        }
    }

    OracleOut {
        zero_variance,
        reward_mean: r_mean,
        reward_std: r_std,
        entropy_mean: h_mean,
        entropy_std: h_std,
        a_hat,
        anchors,
        tokens,
    }
}
