//! Central finite-difference checks of every analytic backward pass.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::losses::{
    balance_loss, balance_loss_grad, dispersion_loss, dispersion_loss_grad, lm_loss, lm_loss_grad,
    z_loss, z_loss_grad, LossWeights,
};
use crate::model::{ForwardOptions, Model, ModelConfig, Variant};
use crate::objective::{loss, loss_and_grads, Batch};
use crate::rng;
use crate::router::{csr_forward, resonance_backward, topk_backward, AnchorSet, ExpertBank};

/// Denominator floor of the relative error, so that gradients near zero are
/// judged by their absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub const COMPONENTS: [&str; 6] = [
    "resonance",
    "balance_loss",
    "dispersion_loss",
    "z_loss",
    "lm_loss",
    "model",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub name: String,
    pub n_checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub component: String,
    pub tol: f64,
    pub groups: Vec<GroupResult>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(component: &str, tol: f64, groups: Vec<GroupResult>) -> Self {
        let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
        Self {
            component: component.to_string(),
            tol,
            passed: max_rel_err < tol && groups.iter().all(|g| g.max_rel_err.is_finite()),
            groups,
            max_rel_err,
        }
    }
}

/// Step size used for parameter value `theta`.
pub fn step_size(theta: f64) -> f64 {
    1e-5 * theta.abs().max(1.0)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` against central differences of `f` around `theta`.
pub fn check_slice(
    name: &str,
    theta: &mut [f64],
    analytic: &[f64],
    mut f: impl FnMut(&[f64]) -> f64,
) -> GroupResult {
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        let h = step_size(orig);
        theta[i] = orig + h;
        let up = f(theta);
        theta[i] = orig - h;
        let down = f(theta);
        theta[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let e = rel_err(analytic[i], numeric);
        worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
    }
    GroupResult {
        name: name.to_string(),
        n_checked: theta.len(),
        max_rel_err: worst,
    }
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

/// Expert `i` multiplies its input by `i + 1`.
struct ScaledBank {
    n: usize,
    d: usize,
}

impl ExpertBank for ScaledBank {
    fn n_experts(&self) -> usize {
        self.n
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn apply(&self, expert: usize, input: &[f64], output: &mut [f64]) {
        for (o, x) in output.iter_mut().zip(input) {
            *o = (expert + 1) as f64 * x;
        }
    }
}

/// Σ of routed outputs with respect to anchors and token representations.
fn check_resonance(tol: f64, seed: u64) -> Result<GradCheckReport> {
    let (t, n, d, k) = (6, 6, 12, 2);
    let mut rng = rng::seeded(seed);
    let mut tokens = random_matrix(&mut rng, t, d, 1.0);
    let mut anchors = random_matrix(&mut rng, n, d, 1.0);
    let bank = ScaledBank { n, d };
    let objective = |tokens: &Matrix, anchors: &Matrix| -> f64 {
        let a = AnchorSet::new(anchors.clone()).expect("nonzero anchors");
        let out =
            csr_forward(tokens, &a, &bank, k, 0.0, &mut rng::seeded(0)).expect("valid shapes");
        out.outputs.as_slice().iter().sum()
    };

    let a = AnchorSet::new(anchors.clone())?;
    let out = csr_forward(&tokens, &a, &bank, k, 0.0, &mut rng::seeded(0))?;
    let mut dtokens = Matrix::zeros(t, d);
    let mut danchors = Matrix::zeros(n, d);
    let mut dscores = Matrix::zeros(t, n);
    for (row, dec) in out.decisions.iter().enumerate() {
        let h_sum: f64 = tokens.row(row).iter().sum();
        let dweights: Vec<f64> = dec
            .indices
            .iter()
            .map(|&e| (e + 1) as f64 * h_sum)
            .collect();
        topk_backward(dec, &dweights, dscores.row_mut(row));
        let direct: f64 = dec
            .indices
            .iter()
            .zip(&dec.weights)
            .map(|(&e, w)| w * (e + 1) as f64)
            .sum();
        dtokens.row_mut(row).iter_mut().for_each(|g| *g += direct);
    }
    resonance_backward(&tokens, &a, &dscores, &mut dtokens, &mut danchors);

    let fixed_tokens = tokens.clone();
    let g_anchor = check_slice(
        "anchors",
        anchors.as_mut_slice(),
        danchors.as_slice(),
        |theta| {
            let m = Matrix::from_vec(n, d, theta.to_vec()).expect("shape");
            objective(&fixed_tokens, &m)
        },
    );
    let fixed_anchors = anchors.clone();
    let g_tokens = check_slice(
        "tokens",
        tokens.as_mut_slice(),
        dtokens.as_slice(),
        |theta| {
            let m = Matrix::from_vec(t, d, theta.to_vec()).expect("shape");
            objective(&m, &fixed_anchors)
        },
    );
    Ok(GradCheckReport::new(
        "resonance",
        tol,
        vec![g_anchor, g_tokens],
    ))
}

fn check_score_loss(
    component: &str,
    tol: f64,
    seed: u64,
    value: fn(&Matrix) -> Result<f64>,
    grad: fn(&Matrix) -> Result<(f64, Matrix)>,
) -> Result<GradCheckReport> {
    let (t, n) = (8, 8);
    let mut rng = rng::seeded(seed);
    let mut scores = random_matrix(&mut rng, t, n, 1.0);
    let (_, g) = grad(&scores)?;
    let group = check_slice("scores", scores.as_mut_slice(), g.as_slice(), |theta| {
        value(&Matrix::from_vec(t, n, theta.to_vec()).expect("shape")).expect("valid scores")
    });
    Ok(GradCheckReport::new(component, tol, vec![group]))
}

fn check_dispersion(tol: f64, seed: u64) -> Result<GradCheckReport> {
    let (n, d) = (8, 16);
    let mut rng = rng::seeded(seed);
    let mut anchors = random_matrix(&mut rng, n, d, 1.0);
    let (_, g) = dispersion_loss_grad(&anchors)?;
    let group = check_slice("anchors", anchors.as_mut_slice(), g.as_slice(), |theta| {
        dispersion_loss(&Matrix::from_vec(n, d, theta.to_vec()).expect("shape")).expect("n >= 2")
    });
    Ok(GradCheckReport::new("dispersion_loss", tol, vec![group]))
}

fn check_lm(tol: f64, seed: u64) -> Result<GradCheckReport> {
    let (t, v) = (8, 11);
    let mut rng = rng::seeded(seed);
    let mut logits = random_matrix(&mut rng, t, v, 3.0);
    let targets: Vec<u32> = (0..t).map(|_| rng.gen_range(0..v as u32)).collect();
    let (_, g) = lm_loss_grad(&logits, &targets)?;
    let group = check_slice("logits", logits.as_mut_slice(), g.as_slice(), |theta| {
        lm_loss(
            &Matrix::from_vec(t, v, theta.to_vec()).expect("shape"),
            &targets,
        )
        .expect("targets in range")
    });
    Ok(GradCheckReport::new("lm_loss", tol, vec![group]))
}

/// D=8, one layer, N=4, V=16, L=4: the scale used for whole-model checks.
pub fn gradcheck_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        dim: 8,
        n_layers: 1,
        n_heads: 2,
        n_experts: 4,
        top_k: 2,
        d_ff: 16,
        vocab_size: 16,
        max_seq_len: 4,
        dropout: 0.1,
        variant,
        anchor_init: crate::model::AnchorInit::Orthogonal,
        init_std: 0.5,
    }
}

/// Total loss of `config`'s model (with dropout and routing noise, both
/// replayed from a fixed seed) against every parameter.
pub fn check_model(config: ModelConfig, tol: f64, seed: u64) -> Result<GradCheckReport> {
    let mut model = Model::build(config.clone(), seed)?;
    let (lanes, seq_len) = (2, config.max_seq_len);
    let mut data_rng = rng::seeded(seed ^ 0x5eed);
    let v = config.vocab_size as u32;
    let inputs: Vec<u32> = (0..lanes * seq_len)
        .map(|_| data_rng.gen_range(0..v))
        .collect();
    let targets: Vec<u32> = (0..lanes * seq_len)
        .map(|_| data_rng.gen_range(0..v))
        .collect();
    let batch = Batch {
        inputs: &inputs,
        targets: &targets,
        lanes,
        seq_len,
    };
    let opts = ForwardOptions::train(config.top_k, 0.05);
    let weights = LossWeights {
        alpha: 0.4,
        beta: 0.6,
        gamma: 0.1,
    };
    let step = loss_and_grads(&model, batch, opts, weights, &mut rng::seeded(seed + 1))?;
    let analytic: Vec<(String, Vec<f64>)> = step
        .grads
        .params()
        .into_iter()
        .map(|p| (p.name, p.data.to_vec()))
        .collect();

    let mut groups = Vec::with_capacity(analytic.len());
    for (g, (name, grad)) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..grad.len() {
            let orig = model.params()[g].data[i];
            let h = step_size(orig);
            let mut eval_at = |value: f64| -> Result<f64> {
                model.params_mut()[g].data[i] = value;
                Ok(
                    loss(&model, batch, opts, weights, &mut rng::seeded(seed + 1))?
                        .0
                        .total,
                )
            };
            let up = eval_at(orig + h)?;
            let down = eval_at(orig - h)?;
            eval_at(orig)?;
            let e = rel_err(grad[i], (up - down) / (2.0 * h));
            worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        }
        groups.push(GroupResult {
            name: name.clone(),
            n_checked: grad.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport::new(
        &format!("model:{}", config.variant.name()),
        tol,
        groups,
    ))
}

/// Runs the named check. `model` covers all three variants.
pub fn run(component: &str, tol: f64, seed: u64) -> Result<Vec<GradCheckReport>> {
    Ok(match component {
        "resonance" => vec![check_resonance(tol, seed)?],
        "balance_loss" => vec![check_score_loss(
            "balance_loss",
            tol,
            seed,
            balance_loss,
            balance_loss_grad,
        )?],
        "z_loss" => vec![check_score_loss("z_loss", tol, seed, z_loss, z_loss_grad)?],
        "dispersion_loss" => vec![check_dispersion(tol, seed)?],
        "lm_loss" => vec![check_lm(tol, seed)?],
        "model" => [Variant::Sra, Variant::StandardMoe, Variant::Dense]
            .into_iter()
            .map(|v| check_model(gradcheck_config(v), tol, seed))
            .collect::<Result<_>>()?,
        other => {
            return Err(invalid(format!(
                "unknown component `{other}`; expected one of {}",
                COMPONENTS.join(", ")
            )))
        }
    })
}
