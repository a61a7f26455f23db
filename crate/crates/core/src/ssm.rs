//! Diagonal state-space primitives: zero-order-hold discretization and the
//! selective (input-dependent) linear recurrence.
//!
//! Continuous dynamics per state index `n` are `h' = A_n h + B_n x`,
//! `y = <C, h> + D x` with `A_n < 0`. For a token with timescale `Δ` the
//! zero-order hold gives `Ā = exp(ΔA)` and `B̄ = (ΔA)^-1 (exp(ΔA) - 1) ΔB`.

use crate::error::{Error, Result};

/// Below this `|ΔA|` the input gain uses its first-order limit `ΔB`.
pub const ZOH_SMALL: f64 = 1e-8;

/// Continuous parameters of a single-channel selective SSM over `L` tokens.
///
/// `b` and `c` are token-major: entry `t * N + n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
    pub delta: Vec<f64>,
}

/// Per-token discretized transition and input gains, token-major `[L, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub state: usize,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

/// `(e^z - 1) / z`, continuous at zero.
#[inline]
fn expm1_over(z: f64) -> f64 {
    if z.abs() < ZOH_SMALL {
        1.0
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of `(e^z - 1) / z` scaled so that `dψ/dA = Δ² * this`, where
/// `ψ(Δ, A) = Δ (e^{ΔA} - 1) / (ΔA)`.
#[inline]
fn dpsi_da_factor(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Zero-order-hold discretization of a diagonal system for one timescale.
pub fn discretize_zoh(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(Error::arg(format!("ZOH timescale must be positive, got {delta}")));
    }
    if a.len() != b.len() {
        return Err(Error::shape("discretize_zoh", &[a.len()], &[b.len()]));
    }
    let a_bar = a.iter().map(|&an| (delta * an).exp()).collect();
    let b_bar = a
        .iter()
        .zip(b)
        .map(|(&an, &bn)| {
            let z = delta * an;
            if z.abs() < ZOH_SMALL {
                delta * bn
            } else {
                z.exp_m1() / z * delta * bn
            }
        })
        .collect();
    Ok((a_bar, b_bar))
}

impl SsmParams {
    pub fn state_size(&self) -> usize {
        self.a.len()
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, l) = (self.a.len(), self.delta.len());
        if n == 0 {
            return Err(Error::arg("SSM state size must be at least 1"));
        }
        if self.b.len() != l * n || self.c.len() != l * n {
            return Err(Error::dim(format!(
                "SSM projections must be {l}x{n}, got B={} C={} values",
                self.b.len(),
                self.c.len()
            )));
        }
        if let Some(a) = self.a.iter().find(|&&a| !(a < 0.0)) {
            return Err(Error::arg(format!("SSM A entries must be negative, found {a}")));
        }
        if let Some(d) = self.delta.iter().find(|&&d| !(d > 0.0)) {
            return Err(Error::arg(format!("SSM timescales must be positive, found {d}")));
        }
        Ok(())
    }

    /// Discretizes every token with its own timescale.
    pub fn discretize(&self) -> Result<DiscreteSsm> {
        self.validate()?;
        let n = self.a.len();
        let mut a_bar = Vec::with_capacity(self.b.len());
        let mut b_bar = Vec::with_capacity(self.b.len());
        for (t, &dt) in self.delta.iter().enumerate() {
            let (ab, bb) = discretize_zoh(&self.a, &self.b[t * n..(t + 1) * n], dt)?;
            a_bar.extend(ab);
            b_bar.extend(bb);
        }
        Ok(DiscreteSsm { state: n, a_bar, b_bar })
    }
}

fn check_discrete(x: &[f64], disc: &DiscreteSsm, c: &[f64]) -> Result<()> {
    let n = disc.state;
    let l = x.len();
    if l == 0 {
        return Err(Error::arg("scan needs at least one token"));
    }
    if disc.a_bar.len() != l * n || disc.b_bar.len() != l * n || c.len() != l * n {
        return Err(Error::dim(format!(
            "scan over {l} tokens with state {n} needs {} parameter values, got Ā={} B̄={} C={}",
            l * n,
            disc.a_bar.len(),
            disc.b_bar.len(),
            c.len()
        )));
    }
    Ok(())
}

/// Runs the recurrence with already-discretized per-token parameters,
/// keeping only the current state.
pub fn scan_discrete(x: &[f64], disc: &DiscreteSsm, c: &[f64], d: f64) -> Result<Vec<f64>> {
    check_discrete(x, disc, c)?;
    let n = disc.state;
    let mut h = vec![0.0; n];
    let mut y = Vec::with_capacity(x.len());
    for (t, &xt) in x.iter().enumerate() {
        let row = t * n..(t + 1) * n;
        let mut acc = d * xt;
        for ((hn, (&ab, &bb)), &cn) in h
            .iter_mut()
            .zip(disc.a_bar[row.clone()].iter().zip(&disc.b_bar[row.clone()]))
            .zip(&c[row])
        {
            *hn = ab * *hn + bb * xt;
            acc += cn * *hn;
        }
        y.push(acc);
    }
    Ok(y)
}

/// Selective scan of one input channel: discretizes per token, then runs
/// the recurrence from a zero state.
pub fn selective_scan(x: &[f64], params: &SsmParams) -> Result<Vec<f64>> {
    if x.len() != params.len() {
        return Err(Error::dim(format!(
            "scan input has {} tokens but parameters cover {}",
            x.len(),
            params.len()
        )));
    }
    let disc = params.discretize()?;
    scan_discrete(x, &disc, &params.c, params.d)
}

/// Literal reference loop for the recurrence: materializes every state
/// `h_0 .. h_L` and reads outputs off them.
pub fn naive_scan_oracle(x: &[f64], a_bar: &[f64], b_bar: &[f64], c: &[f64], d: f64, state: usize) -> Result<Vec<f64>> {
    let disc = DiscreteSsm {
        state,
        a_bar: a_bar.to_vec(),
        b_bar: b_bar.to_vec(),
    };
    check_discrete(x, &disc, c)?;
    let l = x.len();
    let mut hist = vec![vec![0.0; state]; l + 1];
    for t in 1..=l {
        for n in 0..state {
            let i = (t - 1) * state + n;
            hist[t][n] = a_bar[i] * hist[t - 1][n] + b_bar[i] * x[t - 1];
        }
    }
    let mut y = vec![0.0; l];
    for t in 1..=l {
        let mut s = 0.0;
        for n in 0..state {
            s += c[(t - 1) * state + n] * hist[t][n];
        }
        y[t - 1] = s + d * x[t - 1];
    }
    Ok(y)
}

/// Compares the ZOH trajectory under constant input `u` with the analytic
/// continuous solution `h(t) = A^-1 (e^{At} - 1) B u` at each sample time,
/// returning the largest deviation over states and outputs.
pub fn continuous_response_check(
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: f64,
    u: f64,
    delta: f64,
    steps: usize,
) -> Result<f64> {
    if a.len() != b.len() || a.len() != c.len() {
        return Err(Error::dim("A, B and C must have the same state size"));
    }
    let (a_bar, b_bar) = discretize_zoh(a, b, delta)?;
    let mut h = vec![0.0; a.len()];
    let mut worst: f64 = 0.0;
    for k in 1..=steps {
        let t = k as f64 * delta;
        let mut y_disc = d * u;
        let mut y_cont = d * u;
        for n in 0..a.len() {
            h[n] = a_bar[n] * h[n] + b_bar[n] * u;
            let exact = (a[n] * t).exp_m1() / a[n] * b[n] * u;
            worst = worst.max((h[n] - exact).abs());
            y_disc += c[n] * h[n];
            y_cont += c[n] * exact;
        }
        worst = worst.max((y_disc - y_cont).abs());
    }
    Ok(worst)
}

/// Dimensions of a multi-channel scan: `channels` independent recurrences of
/// `len` tokens sharing per-token `B`, `C`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanDims {
    pub channels: usize,
    pub len: usize,
    pub state: usize,
}

/// Borrowed inputs in the layouts documented on `Tape::selective_scan`.
pub(crate) struct ScanInputs<'a> {
    pub x: &'a [f64],
    pub delta: &'a [f64],
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
}

pub(crate) struct ScanGrads {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

/// Forward scan for all channels, returning outputs `[Ch, L]` and the
/// post-update states `[Ch, L, N]` needed by the backward pass.
pub(crate) fn scan_with_states(p: &ScanInputs<'_>, dims: ScanDims) -> (Vec<f64>, Vec<f64>) {
    let ScanDims {
        channels,
        len: l,
        state: n,
    } = dims;
    let mut y = vec![0.0; channels * l];
    let mut states = vec![0.0; channels * l * n];
    let mut h = vec![0.0; n];
    for ch in 0..channels {
        h.iter_mut().for_each(|v| *v = 0.0);
        let arow = &p.a[ch * n..(ch + 1) * n];
        for t in 0..l {
            let xt = p.x[ch * l + t];
            let dt = p.delta[ch * l + t];
            let mut acc = p.d[ch] * xt;
            for k in 0..n {
                let z = dt * arow[k];
                let a_bar = z.exp();
                let b_bar = dt * expm1_over(z) * p.b[k * l + t];
                h[k] = a_bar * h[k] + b_bar * xt;
                acc += p.c[k * l + t] * h[k];
            }
            states[(ch * l + t) * n..(ch * l + t + 1) * n].copy_from_slice(&h);
            y[ch * l + t] = acc;
        }
    }
    (y, states)
}

/// Back-propagation through time for [`scan_with_states`].
pub(crate) fn scan_backward(p: &ScanInputs<'_>, dims: ScanDims, states: &[f64], gy: &[f64]) -> ScanGrads {
    let ScanDims {
        channels,
        len: l,
        state: n,
    } = dims;
    let mut g = ScanGrads {
        x: vec![0.0; channels * l],
        delta: vec![0.0; channels * l],
        a: vec![0.0; channels * n],
        b: vec![0.0; n * l],
        c: vec![0.0; n * l],
        d: vec![0.0; channels],
    };
    let mut gh = vec![0.0; n];
    for ch in 0..channels {
        gh.iter_mut().for_each(|v| *v = 0.0);
        let arow = &p.a[ch * n..(ch + 1) * n];
        for t in (0..l).rev() {
            let i = ch * l + t;
            let (xt, dt, go) = (p.x[i], p.delta[i], gy[i]);
            g.d[ch] += go * xt;
            let mut gx = go * p.d[ch];
            let mut gdt = 0.0;
            let h_now = &states[i * n..(i + 1) * n];
            for k in 0..n {
                let h_prev = if t == 0 { 0.0 } else { states[(i - 1) * n + k] };
                g.c[k * l + t] += go * h_now[k];
                gh[k] += go * p.c[k * l + t];

                let ak = arow[k];
                let z = dt * ak;
                let a_bar = z.exp();
                let bk = p.b[k * l + t];
                let psi = dt * expm1_over(z);
                let b_bar = psi * bk;

                let g_abar = gh[k] * h_prev;
                let g_bbar = gh[k] * xt;
                gx += gh[k] * b_bar;
                // dψ/dΔ = e^{ΔA}; dψ/dA = Δ² * factor
                gdt += g_abar * ak * a_bar + g_bbar * bk * a_bar;
                g.a[ch * n + k] += g_abar * dt * a_bar + g_bbar * bk * dt * dt * dpsi_da_factor(z);
                g.b[k * l + t] += g_bbar * psi;
                gh[k] *= a_bar;
            }
            g.x[i] += gx;
            g.delta[i] += gdt;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoh_closed_form_values() {
        let (ab, bb) = discretize_zoh(&[-1.0], &[1.0], 0.1).unwrap();
        assert!((ab[0] - 0.904_837_418_035_959_6).abs() < 1e-15);
        assert!((bb[0] - 0.095_162_581_964_040_43).abs() < 1e-15);

        let (ab, _) = discretize_zoh(&[-1.0], &[1.0], std::f64::consts::LN_2).unwrap();
        assert!((ab[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zoh_small_step_limit() {
        let delta = 1e-12;
        let (_, bb) = discretize_zoh(&[-1.0], &[3.0], delta).unwrap();
        // series: Δ B (1 + ΔA/2 + ...)
        let series = delta * 3.0 * (1.0 - delta / 2.0);
        assert!((bb[0] - series).abs() <= 1e-12 * series);
    }

    #[test]
    fn zoh_rejects_nonpositive_step() {
        assert!(discretize_zoh(&[-1.0], &[1.0], 0.0).is_err());
        assert!(discretize_zoh(&[-1.0], &[1.0], -0.5).is_err());
    }

    fn constant_disc(l: usize, a: f64, b: f64) -> DiscreteSsm {
        DiscreteSsm {
            state: 1,
            a_bar: vec![a; l],
            b_bar: vec![b; l],
        }
    }

    #[test]
    fn unrolled_recurrence() {
        let disc = constant_disc(3, 0.5, 1.0);
        let c = vec![1.0; 3];
        let y = scan_discrete(&[1.0, 0.0, 0.0], &disc, &c, 0.0).unwrap();
        assert_eq!(y, vec![1.0, 0.5, 0.25]);
        let y = scan_discrete(&[1.0, 0.0, 0.0], &disc, &c, 1.0).unwrap();
        assert_eq!(y, vec![2.0, 0.5, 0.25]);
    }

    #[test]
    fn oracle_single_step_and_zero_input() {
        let y = naive_scan_oracle(&[2.0], &[0.3, 0.7], &[0.5, -1.0], &[2.0, 1.0], 0.25, 2).unwrap();
        let expect = (2.0 * 0.5 + -1.0) * 2.0 + 0.25 * 2.0;
        assert_eq!(y, vec![expect]);
        let y = naive_scan_oracle(&[0.0; 4], &[0.9; 4], &[1.0; 4], &[1.0; 4], 3.0, 1).unwrap();
        assert_eq!(y, vec![0.0; 4]);
    }

    #[test]
    fn length_mismatch_is_reported() {
        let p = SsmParams {
            a: vec![-1.0],
            b: vec![1.0; 3],
            c: vec![1.0; 3],
            d: 0.0,
            delta: vec![0.1; 3],
        };
        assert!(selective_scan(&[1.0, 2.0], &p).is_err());
        let disc = constant_disc(2, 0.5, 1.0);
        assert!(scan_discrete(&[1.0, 2.0, 3.0], &disc, &[1.0; 2], 0.0).is_err());
    }

    #[test]
    fn rejects_unstable_params() {
        let p = SsmParams {
            a: vec![0.5],
            b: vec![1.0],
            c: vec![1.0],
            d: 0.0,
            delta: vec![0.1],
        };
        assert!(selective_scan(&[1.0], &p).is_err());
    }

    #[test]
    fn constant_input_matches_continuous_solution() {
        assert_eq!(
            continuous_response_check(&[-1.0], &[1.0], &[1.0], 0.0, 0.0, 0.25, 16).unwrap(),
            0.0
        );
        let dev = continuous_response_check(&[-1.0], &[1.0], &[1.0], 0.0, 1.0, 0.25, 16).unwrap();
        assert!(dev <= 1e-9, "{dev}");
        let dev = continuous_response_check(&[-1.0], &[1.0], &[1.0], 0.0, 1.0, 0.5, 16).unwrap();
        assert!(dev <= 1e-9, "{dev}");
    }
}
