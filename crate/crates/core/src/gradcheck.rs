//! Central finite-difference checks of every analytic gradient, in `f64`.
//!
//! Cluster labels, the prototype bank, the saliency partition and the saliency
//! anchors are computed once at the base point and held fixed while perturbing, so
//! each check differentiates exactly the function the backward pass differentiates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cluster::{
    affinity, harden, init_prototypes, sinkhorn_assign, update_prototypes, InitStrategy, PrototypeBank,
};
use crate::error::Result;
use crate::flow::{flow_to_image, FlowField, FlowImage};
use crate::losses::{
    cluster_contrastive_loss, proto_loss, recon_loss, saliency_anchors, saliency_contrastive_loss_with, LossWeights,
    SaliencyAnchors,
};
use crate::mask::Mask;
use crate::net::layers::{attention_backward, attention_forward};
use crate::net::{l2_normalize, l2_normalize_backward, EmbeddingMap, NetConfig, NetParams};
use crate::saliency::{saliency_partition, SaliencyPartition};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per gradient.
    pub coords: usize,
    /// Side of the square network input.
    pub size: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            coords: 72,
            size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    /// Sampled coordinates replaced because they sat on a ReLU or max-pool kink.
    pub kinks_skipped: usize,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks `grad` against central differences of `f` at coordinates drawn by `pick`.
///
/// A coordinate whose one-sided slopes disagree by more than the tolerance of the
/// check is non-differentiable there (or nearly so) and is replaced by another draw.
fn check<P, F>(
    name: &str,
    cfg: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
    mut pick: P,
    grad: impl Fn(usize) -> f64,
    mut f: F,
) -> CheckReport
where
    P: FnMut(&mut ChaCha8Rng, usize) -> usize,
    F: FnMut(usize, f64) -> f64,
{
    let h = cfg.step;
    let mut max_rel_err: f64 = 0.0;
    let mut kinks = 0;
    let mut done = 0;
    let mut attempts = 0;
    while done < cfg.coords && attempts < cfg.coords * 20 {
        attempts += 1;
        let i = pick(rng, attempts - 1);
        let f0 = f(i, 0.0);
        let fp = f(i, h);
        let fm = f(i, -h);
        let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
        if rel_err(right, left) > 0.5 * cfg.tolerance.max(1e-3) && (right - left).abs() > 1e-7 {
            kinks += 1;
            continue;
        }
        max_rel_err = max_rel_err.max(rel_err(grad(i), (fp - fm) / (2.0 * h)));
        done += 1;
    }
    CheckReport {
        name: name.to_string(),
        coords: done,
        max_rel_err,
        kinks_skipped: kinks,
        passed: done >= cfg.coords && max_rel_err <= cfg.tolerance,
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            scale * v
        })
        .collect()
}

/// A field with a moving square in the top-left quadrant against a moving background.
fn test_flow(size: usize, rng: &mut ChaCha8Rng) -> FlowField {
    let vectors = (0..size * size)
        .map(|i| {
            let (x, y) = (i % size, i / size);
            let base = if x < size / 2 && y < size / 2 {
                [-1.0, 0.8]
            } else {
                [1.2, 0.3]
            };
            [base[0] + 0.2 * rng.random::<f32>(), base[1] + 0.2 * rng.random::<f32>()]
        })
        .collect();
    FlowField::new(size, size, vectors).expect("valid field")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Objective {
    Recon,
    Proto,
    Cluster,
    Saliency,
    Composite,
}

struct Frozen {
    image: FlowImage,
    input: Vec<f64>,
    labels: Vec<usize>,
    bank: PrototypeBank,
    part: SaliencyPartition,
    anchors: SaliencyAnchors,
}

fn objective_weights(obj: Objective) -> [f64; 4] {
    match obj {
        Objective::Recon => [1.0, 0.0, 0.0, 0.0],
        Objective::Proto => [0.0, 1.0, 0.0, 0.0],
        Objective::Cluster => [0.0, 0.0, 1.0, 0.0],
        Objective::Saliency => [0.0, 0.0, 0.0, 1.0],
        Objective::Composite => [1.0, 0.5, 0.5, 0.5],
    }
}

/// Loss value and, when requested, its gradient with respect to every parameter.
fn evaluate(
    net: &NetParams<f64>,
    fr: &Frozen,
    obj: Objective,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
    let [wc, w1, w2, w3] = objective_weights(obj);
    let size = fr.image.width();
    let fwd = net.forward(&fr.input, size, size)?;
    let raw = EmbeddingMap::from_channel_major(
        &fwd.embedding,
        fwd.grid_width(),
        fwd.grid_height(),
        net.config().embed_dim,
    )?;
    let z = l2_normalize(&raw);
    let lc = recon_loss(&fr.image, &fwd.recon, size, size)?;
    let pc = proto_loss(&z.map, &fr.labels, &fr.bank)?;
    let cc = cluster_contrastive_loss(&z.map, &fr.labels, &fr.bank)?;
    let sc = saliency_contrastive_loss_with(&z.map, &fr.part, &fr.anchors)?;
    let value = wc * lc.value + w1 * pc.value + w2 * cc.value + w3 * sc.value;
    if !want_grad {
        return Ok((value, None));
    }
    let d_norm: Vec<f64> = (0..pc.grad.len())
        .map(|i| w1 * pc.grad[i] + w2 * cc.grad[i] + w3 * sc.grad[i])
        .collect();
    let d_raw = l2_normalize_backward(&z, &d_norm);
    let d_embedding = raw.to_channel_major::<f64>(&d_raw);
    let d_recon: Vec<f64> = lc.grad.iter().map(|g| wc * g).collect();
    let grads = net.backward(&fwd, &d_embedding, &d_recon)?;
    Ok((value, Some(grads.tensors)))
}

fn network_checks(seed: u64, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let net = NetParams::<f64>::init(NetConfig::default(), seed);
    let flow = test_flow(cfg.size, rng);
    let image = flow_to_image(&flow);
    let input: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let part = saliency_partition(&flow, LossWeights::default().delta)?;

    let fwd = net.forward(&input, cfg.size, cfg.size)?;
    let raw = EmbeddingMap::from_channel_major(
        &fwd.embedding,
        fwd.grid_width(),
        fwd.grid_height(),
        net.config().embed_dim,
    )?;
    let z = l2_normalize(&raw);
    let (bank, _) = init_prototypes(InitStrategy::Normal, 4, net.config().embed_dim, seed ^ 0x5eed)?;
    let plan = sinkhorn_assign(&affinity(&z.map, &bank)?, LossWeights::default().kappa)?;
    let labels = harden(&plan);
    let bank = update_prototypes(&z.map, &labels, &bank)?;
    let anchors = saliency_anchors(&z.map, &part)?;
    let frozen = Frozen {
        image,
        input,
        labels,
        bank,
        part,
        anchors,
    };

    let sizes: Vec<usize> = net.params().iter().map(|p| p.value.len()).collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &n| {
            let start = *acc;
            *acc += n;
            Some(start)
        })
        .collect();
    let locate = |flat: usize| -> (usize, usize) {
        let t = offsets.iter().rposition(|&o| o <= flat).unwrap();
        (t, flat - offsets[t])
    };

    let objectives = [
        ("recon (network)", Objective::Recon),
        ("proto (network)", Objective::Proto),
        ("cluster (network)", Objective::Cluster),
        ("saliency (network)", Objective::Saliency),
        ("composite", Objective::Composite),
    ];
    let mut reports = Vec::new();
    for (name, obj) in objectives {
        let (_, grads) = evaluate(&net, &frozen, obj, true)?;
        let grads = grads.expect("gradient requested");
        let mut probe = net.clone();
        let mut failure = None;
        let report = check(
            name,
            cfg,
            rng,
            // cycle through the tensors so every layer is covered
            |rng, n| {
                let t = n % sizes.len();
                offsets[t] + rng.random_range(0..sizes[t])
            },
            |flat| {
                let (t, i) = locate(flat);
                grads[t][i]
            },
            |flat, delta| {
                let (t, i) = locate(flat);
                let original = net.params()[t].value[i];
                probe.params_mut()[t].value[i] = original + delta;
                let v = match evaluate(&probe, &frozen, obj, false) {
                    Ok((v, _)) => v,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                };
                probe.params_mut()[t].value[i] = original;
                v
            },
        );
        if let Some(e) = failure {
            return Err(e);
        }
        reports.push(report);
    }
    Ok(reports)
}

fn loss_checks(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let (gw, gh, p, k) = (4, 4, 10, 5);
    let s = gw * gh;
    let mut reports = Vec::new();

    let target = FlowImage::from_channels(
        cfg.size,
        cfg.size,
        gaussian(rng, 3 * cfg.size * cfg.size, 0.5)
            .iter()
            .map(|&v| v as f32)
            .collect(),
    )?;
    let recon = gaussian(rng, 3 * cfg.size * cfg.size, 0.5);
    let g = recon_loss(&target, &recon, cfg.size, cfg.size)?.grad;
    reports.push(check(
        "recon",
        cfg,
        rng,
        |rng, _| rng.random_range(0..recon.len()),
        |i| g[i],
        |i, d| {
            let mut r = recon.clone();
            r[i] += d;
            recon_loss(&target, &r, cfg.size, cfg.size).map_or(f64::NAN, |l| l.value)
        },
    ));

    // losses on normalized embeddings, differentiated with respect to the raw map
    let raw = EmbeddingMap::new(gw, gh, p, gaussian(rng, s * p, 1.0))?;
    let (bank, _) = init_prototypes(InitStrategy::Normal, k, p, rng.random())?;
    let labels: Vec<usize> = (0..s).map(|_| rng.random_range(0..k)).collect();
    let fg = Mask::new(gw, gh, (0..s).map(|i| i % 3 == 0).collect())?;
    let part = SaliencyPartition {
        fg_mask: fg.clone(),
        bg_mask: fg.complement(),
        m: [0.0; 2],
        m_f: [0.0; 2],
        m_b: [0.0; 2],
        fg_empty: false,
        bg_empty: false,
        bg_grid: fg.complement(),
        fg_grid: fg,
    };
    let anchors = saliency_anchors(&l2_normalize(&raw).map, &part)?;

    type LossFn<'a> = Box<dyn Fn(&EmbeddingMap) -> Result<crate::losses::LossValue> + 'a>;
    let losses: Vec<(&str, LossFn)> = vec![
        ("proto", Box::new(|z| proto_loss(z, &labels, &bank))),
        ("cluster", Box::new(|z| cluster_contrastive_loss(z, &labels, &bank))),
        (
            "saliency",
            Box::new(|z| saliency_contrastive_loss_with(z, &part, &anchors)),
        ),
    ];
    for (name, loss) in &losses {
        let z = l2_normalize(&raw);
        let g = l2_normalize_backward(&z, &loss(&z.map)?.grad);
        reports.push(check(
            name,
            cfg,
            rng,
            |rng, _| rng.random_range(0..raw.data.len()),
            |i| g[i],
            |i, d| {
                let mut r = raw.clone();
                r.data[i] += d;
                loss(&l2_normalize(&r).map).map_or(f64::NAN, |l| l.value)
            },
        ));
    }

    // the attention branch alone, on a 4x4 input
    let (c, h, w) = (3, 4, 4);
    let x = gaussian(rng, c * h * w, 1.0);
    let weights = gaussian(rng, c * h * w, 1.0);
    let (_, cache) = attention_forward(&x, c, h, w);
    let g = attention_backward(&weights, &cache);
    reports.push(check(
        "attention",
        cfg,
        rng,
        |rng, _| rng.random_range(0..x.len()),
        |i| g[i],
        |i, d| {
            let mut xx = x.clone();
            xx[i] += d;
            let (out, _) = attention_forward(&xx, c, h, w);
            out.iter().zip(&weights).map(|(a, b)| a * b).sum()
        },
    ));
    Ok(reports)
}

/// Every loss against its direct input, the attention branch, and every loss plus the
/// composite objective through the whole network.
pub fn run_suite(seed: u64, cfg: &GradcheckConfig) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = loss_checks(cfg, &mut rng)?;
    reports.extend(network_checks(seed, cfg, &mut rng)?);
    Ok(reports)
}
