// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode gradients for the toy transformer.
//!
//! The backward pass mirrors [`forward`](super::forward::forward) operation
//! by operation. Activation gradients are taken with respect to the
//! post-intervention value of each site, which is also the gradient with
//! respect to a vector added there. A `ReplaceWith` intervention cuts the
//! gradient flowing into the computation that produced the replaced value.

use std::collections::HashSet;

use super::checkpoint::Checkpoint;
use super::forward::{gelu_grad, run, ActivationSite, ActivationTape, Intervention, LnCache, SiteKind};
use super::tokenizer::TokenId;
use crate::error::{DemError, Result};
use crate::numerics::{axpy, dot, log_softmax, softmax_unchecked, Matrix, Vector};

/// Gradients with respect to every recorded hidden state.
#[derive(Debug, Clone)]
pub struct ActivationGrads {
    pub block_in: Vec<Matrix>,
    pub attn_out: Vec<Matrix>,
    pub mlp_out: Vec<Matrix>,
    pub block_out: Vec<Matrix>,
}

impl ActivationGrads {
    pub fn site(&self, site: ActivationSite) -> &[f64] {
        let m = match site.kind {
            SiteKind::Embedding => &self.block_in[0],
            SiteKind::Block => &self.block_out[site.layer],
            SiteKind::Attn => &self.attn_out[site.layer],
            SiteKind::Mlp => &self.mlp_out[site.layer],
        };
        m.row(site.token)
    }
}

fn ln_backward(
    dy: &Matrix,
    cache: &LnCache,
    gamma: &Matrix,
    mut dgamma: Option<&mut Matrix>,
    mut dbeta: Option<&mut Matrix>,
) -> Matrix {
    let (t, d) = dy.shape();
    let g = gamma.as_slice();
    let mut dx = Matrix::zeros(t, d);
    let mut gx = vec![0.0; d];
    for i in 0..t {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        if let Some(dg) = dgamma.as_deref_mut() {
            let dg = dg.as_mut_slice();
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            axpy(1.0, dyr, db.as_mut_slice());
        }
        for j in 0..d {
            gx[j] = dyr[j] * g[j];
        }
        let mean_g = gx.iter().sum::<f64>() / d as f64;
        let mean_gx = dot(&gx, xh) / d as f64;
        let r = cache.rstd[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            out[j] = r * (gx[j] - mean_g - xh[j] * mean_gx);
        }
    }
    dx
}

fn zero_rows(m: &mut Matrix, rows: impl IntoIterator<Item = usize>) {
    for r in rows {
        m.row_mut(r).fill(0.0);
    }
}

/// Backpropagates `dlogits` (`T × vocab`) through a recorded run.
///
/// Parameter gradients are accumulated only when `want_params` is set.
pub(crate) fn backward(
    ckpt: &Checkpoint,
    tape: &ActivationTape,
    dlogits: &Matrix,
    interventions: &[Intervention],
    want_params: bool,
) -> Result<(Option<Checkpoint>, ActivationGrads)> {
    let cfg = &ckpt.config;
    let cache = &tape.cache;
    let t = cache.tokens.len();
    if dlogits.shape() != (t, cfg.vocab_size) {
        return Err(DemError::Dimension(format!(
            "dlogits is {:?}, expected ({t}, {})",
            dlogits.shape(),
            cfg.vocab_size
        )));
    }
    let (n_heads, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let replaced: HashSet<(usize, SiteKind, usize)> = interventions
        .iter()
        .filter(|iv| iv.is_replace())
        .map(|iv| (iv.site.layer, iv.site.kind, iv.site.token))
        .collect();
    let replaced = &replaced;
    let cut = |layer: usize, kind: SiteKind| {
        (0..t).filter(move |&i| replaced.contains(&(layer, kind, i)))
    };

    let mut grads = want_params.then(|| ckpt.zeros_like());

    if let Some(g) = grads.as_mut() {
        cache.xf.t_matmul_acc(dlogits, &mut g.w_u)?;
    }
    let dxf = dlogits.matmul_t(&ckpt.w_u)?;
    let mut dh = {
        let (dg, db) = match grads.as_mut() {
            Some(g) => (Some(&mut g.lnf_gamma), Some(&mut g.lnf_beta)),
            None => (None, None),
        };
        ln_backward(&dxf, &cache.lnf, &ckpt.lnf_gamma, dg, db)
    };

    let n_layers = cfg.n_layers;
    let mut g_in = vec![Matrix::zeros(0, 0); n_layers];
    let mut g_attn = vec![Matrix::zeros(0, 0); n_layers];
    let mut g_mlp = vec![Matrix::zeros(0, 0); n_layers];
    let mut g_out = vec![Matrix::zeros(0, 0); n_layers];

    for l in (0..n_layers).rev() {
        let w = &ckpt.layers[l];
        let lc = &cache.layers[l];
        g_out[l] = dh.clone();
        let mut dpre_out = dh;
        zero_rows(&mut dpre_out, cut(l, SiteKind::Block));

        g_attn[l] = dpre_out.clone();
        g_mlp[l] = dpre_out.clone();
        let mut da = dpre_out.clone();
        zero_rows(&mut da, cut(l, SiteKind::Attn));
        let mut dm = dpre_out.clone();
        zero_rows(&mut dm, cut(l, SiteKind::Mlp));
        let mut dh_in = dpre_out;

        // mlp
        let mut dhidden = dm.matmul_t(&w.w_o_mlp)?;
        if let Some(g) = grads.as_mut() {
            tape.mlp_hidden[l].t_matmul_acc(&dm, &mut g.layers[l].w_o_mlp)?;
        }
        for (dv, &pre) in dhidden.as_mut_slice().iter_mut().zip(lc.mlp_pre.as_slice()) {
            *dv *= gelu_grad(pre);
        }
        if let Some(g) = grads.as_mut() {
            lc.x2.t_matmul_acc(&dhidden, &mut g.layers[l].w_in)?;
        }
        let dx2 = dhidden.matmul_t(&w.w_in)?;
        {
            let (dg, db) = match grads.as_mut() {
                Some(g) => {
                    let gl = &mut g.layers[l];
                    (Some(&mut gl.ln2_gamma), Some(&mut gl.ln2_beta))
                }
                None => (None, None),
            };
            dh_in.add_assign(&ln_backward(&dx2, &lc.ln2, &w.ln2_gamma, dg, db))?;
        }

        // attention
        let dmix = da.matmul_t(&w.w_o_attn)?;
        if let Some(g) = grads.as_mut() {
            tape.attn_mix[l].t_matmul_acc(&da, &mut g.layers[l].w_o_attn)?;
        }
        let d = cfg.d_model;
        let mut dq = Matrix::zeros(t, d);
        let mut dk = Matrix::zeros(t, d);
        let mut dv = Matrix::zeros(t, d);
        let mut dp = vec![0.0; t];
        for head in 0..n_heads {
            let off = head * hd;
            let p = &lc.probs[head];
            for i in 0..t {
                let dmi = &dmix.row(i)[off..off + hd];
                if dmi.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let pr = p.row(i);
                let mut weighted = 0.0;
                for j in 0..=i {
                    dp[j] = dot(dmi, &lc.v.row(j)[off..off + hd]);
                    weighted += pr[j] * dp[j];
                    axpy(pr[j], dmi, &mut dv.row_mut(j)[off..off + hd]);
                }
                for j in 0..=i {
                    let ds = pr[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    axpy(ds, &lc.k.row(j)[off..off + hd], &mut dq.row_mut(i)[off..off + hd]);
                    axpy(ds, &lc.q.row(i)[off..off + hd], &mut dk.row_mut(j)[off..off + hd]);
                }
            }
        }
        if let Some(g) = grads.as_mut() {
            let gl = &mut g.layers[l];
            lc.x1.t_matmul_acc(&dq, &mut gl.w_q)?;
            lc.x1.t_matmul_acc(&dk, &mut gl.w_k)?;
            lc.x1.t_matmul_acc(&dv, &mut gl.w_v)?;
        }
        let mut dx1 = dq.matmul_t(&w.w_q)?;
        dx1.add_assign(&dk.matmul_t(&w.w_k)?)?;
        dx1.add_assign(&dv.matmul_t(&w.w_v)?)?;
        {
            let (dg, db) = match grads.as_mut() {
                Some(g) => {
                    let gl = &mut g.layers[l];
                    (Some(&mut gl.ln1_gamma), Some(&mut gl.ln1_beta))
                }
                None => (None, None),
            };
            dh_in.add_assign(&ln_backward(&dx1, &lc.ln1, &w.ln1_gamma, dg, db))?;
        }
        g_in[l] = dh_in.clone();
        dh = dh_in;
    }

    if let Some(g) = grads.as_mut() {
        let mut demb = dh;
        zero_rows(&mut demb, cut(0, SiteKind::Embedding));
        for (i, &tok) in cache.tokens.iter().enumerate() {
            axpy(1.0, demb.row(i), g.tok_emb.row_mut(tok as usize));
            axpy(1.0, demb.row(i), g.pos_emb.row_mut(i));
        }
    }

    Ok((
        grads,
        ActivationGrads {
            block_in: g_in,
            attn_out: g_attn,
            mlp_out: g_mlp,
            block_out: g_out,
        },
    ))
}

/// Mean next-token NLL over positions with a target, and its gradient with
/// respect to the logits.
pub fn nll_and_dlogits(logits: &Matrix, targets: &[Option<TokenId>]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(DemError::InvalidInput(format!(
            "{} targets for {} positions",
            targets.len(),
            logits.rows()
        )));
    }
    let n = targets.iter().flatten().count();
    if n == 0 {
        return Err(DemError::InvalidInput("no target positions".into()));
    }
    let vocab = logits.cols();
    let mut dl = Matrix::zeros(logits.rows(), vocab);
    let mut nll = 0.0;
    for (i, tgt) in targets.iter().enumerate() {
        let Some(tgt) = *tgt else { continue };
        if tgt as usize >= vocab {
            return Err(DemError::InvalidInput(format!("target id {tgt} outside vocabulary")));
        }
        let row = logits.row(i);
        nll -= log_softmax(row)[tgt as usize];
        let p = softmax_unchecked(row);
        let out = dl.row_mut(i);
        for (o, pj) in out.iter_mut().zip(&p) {
            *o = pj / n as f64;
        }
        out[tgt as usize] -= 1.0 / n as f64;
    }
    Ok((nll / n as f64, dl))
}

/// Where a gradient is requested.
#[derive(Debug, Clone, PartialEq)]
pub enum GradSite {
    /// A parameter tensor by manifest name.
    Param(String),
    /// A hidden state; equivalently a delta vector added at that site.
    Activation(ActivationSite),
}

/// Loss plus gradients at the requested sites only.
#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub nll: f64,
    pub params: Vec<(String, Matrix)>,
    pub activations: Vec<(ActivationSite, Vector)>,
}

impl LossAndGrads {
    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn activation(&self, site: ActivationSite) -> Option<&[f64]> {
        self.activations
            .iter()
            .find(|(s, _)| *s == site)
            .map(|(_, v)| v.as_slice())
    }
}

/// Mean next-token NLL over positions with `Some` target (position `i`'s
/// target is the token predicted from position `i`), with gradients at the
/// requested sites. Everything not requested is frozen.
pub fn loss_and_grads(
    ckpt: &Checkpoint,
    tokens: &[TokenId],
    targets: &[Option<TokenId>],
    interventions: &[Intervention],
    requests: &[GradSite],
) -> Result<LossAndGrads> {
    if targets.len() != tokens.len() {
        return Err(DemError::InvalidInput(format!(
            "targets ({}) not aligned with tokens ({})",
            targets.len(),
            tokens.len()
        )));
    }
    let tape = run(ckpt, tokens, interventions)?;
    let (nll, dlogits) = nll_and_dlogits(&tape.logits, targets)?;
    let want_params = requests.iter().any(|r| matches!(r, GradSite::Param(_)));
    for r in requests {
        match r {
            GradSite::Param(name) if ckpt.tensor(name).is_none() => {
                return Err(DemError::InvalidInput(format!("no parameter named `{name}`")));
            }
            GradSite::Activation(site) => {
                if site.layer >= ckpt.config.n_layers
                    || site.token >= tokens.len()
                    || (site.kind == SiteKind::Embedding && site.layer != 0)
                {
                    return Err(DemError::InvalidInput(format!("invalid gradient site {site:?}")));
                }
            }
            _ => {}
        }
    }
    let (grads, act) = backward(ckpt, &tape, &dlogits, interventions, want_params)?;
    let mut params = Vec::new();
    let mut activations = Vec::new();
    for r in requests {
        match r {
            GradSite::Param(name) => {
                let g = grads.as_ref().and_then(|g| g.tensor(name)).expect("checked");
                params.push((name.clone(), g.clone()));
            }
            GradSite::Activation(site) => activations.push((*site, act.site(*site).to_vec())),
        }
    }
    Ok(LossAndGrads {
        nll,
        params,
        activations,
    })
}

/// Full parameter gradient of the mean NLL of one sequence.
pub(crate) fn param_grads(
    ckpt: &Checkpoint,
    tokens: &[TokenId],
    targets: &[Option<TokenId>],
) -> Result<(f64, Checkpoint)> {
    let tape = run(ckpt, tokens, &[])?;
    let (nll, dlogits) = nll_and_dlogits(&tape.logits, targets)?;
    let (grads, _) = backward(ckpt, &tape, &dlogits, &[], true)?;
    Ok((nll, grads.expect("requested")))
}
