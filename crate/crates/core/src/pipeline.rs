//! Online segmentation of a flow sequence.
//!
//! A [`SequenceState`] owns the network and the prototype bank for one sequence.
//! Both persist across frames: the first frame gets `t_max` iterations, later frames
//! `per_frame_iters`, each starting from where the previous frame left off.

use std::io::Write;

use crate::cluster::{
    affinity, dot, harden, init_prototypes, nearest_prototype, sinkhorn_solve, update_prototypes, InitDiagnostics,
    InitStrategy, PrototypeBank, SinkhornConfig,
};
use crate::error::{Error, Result};
use crate::flow::{flow_to_image, FlowField, FlowImage};
use crate::losses::{
    cluster_contrastive_loss, combine_embedding_grads, proto_loss, recon_loss, saliency_contrastive_loss,
    LossComponents, LossWeights,
};
use crate::mask::Mask;
use crate::net::{l2_normalize, l2_normalize_backward, AdamConfig, EmbeddingMap, NetConfig, NetParams, GRID_SCALE};
use crate::saliency::{saliency_partition, SaliencyPartition};

pub type SegmentationMask = Mask;

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterConfig {
    pub k: usize,
    pub net: NetConfig,
    pub weights: LossWeights,
    pub per_frame_iters: usize,
    pub pretrain_epochs: usize,
    pub init: InitStrategy,
    pub seed: u64,
    pub adam: AdamConfig,
    pub sinkhorn: SinkhornConfig,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            k: 30,
            net: NetConfig::default(),
            weights: LossWeights::default(),
            per_frame_iters: 10,
            pretrain_epochs: 10,
            init: InitStrategy::Normal,
            seed: 0,
            adam: AdamConfig::default(),
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

/// One optimization step, as seen by an observer.
#[derive(Debug)]
pub struct IterationEvent<'a> {
    pub frame: usize,
    pub iteration: usize,
    pub global_iteration: usize,
    pub bank_before: &'a PrototypeBank,
    pub bank_after: &'a PrototypeBank,
    pub labels: &'a [usize],
    pub losses: LossComponents,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub losses: LossComponents,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameDiagnostics {
    pub frame: usize,
    pub iterations: usize,
    pub foreground_prototypes: usize,
    /// The background grid set was empty, so every prototype was labeled foreground.
    pub empty_background: bool,
    pub degenerate_pixels: usize,
    pub max_sinkhorn_iterations: usize,
    pub max_sinkhorn_violation: f64,
    pub unconverged_solves: usize,
    pub separation: f64,
}

/// Per-prototype labels from [`label_prototypes`].
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeLabels {
    pub background: Vec<bool>,
    pub empty_background: bool,
}

#[derive(Clone, Debug)]
pub struct SequenceState {
    net: NetParams<f32>,
    bank: PrototypeBank,
    config: SegmenterConfig,
    frame_index: usize,
    pretrained: bool,
    dims: Option<(usize, usize)>,
    global_iteration: usize,
    /// Column potentials of the last transport solve, reused as its warm start.
    potentials: Option<Vec<f64>>,
    pub init_diagnostics: InitDiagnostics,
    pub records: Vec<LossRecord>,
    pub diagnostics: Vec<FrameDiagnostics>,
}

impl SequenceState {
    pub fn new(config: SegmenterConfig) -> Result<Self> {
        let net = NetParams::init(config.net.clone(), config.seed);
        Self::with_network(config, net)
    }

    /// Starts from given network weights (e.g. a loaded checkpoint).
    pub fn with_network(config: SegmenterConfig, net: NetParams<f32>) -> Result<Self> {
        config.weights.validate()?;
        if net.config() != &config.net {
            return Err(Error::InvalidParameter(
                "network does not match the configured architecture".into(),
            ));
        }
        let (bank, init_diagnostics) =
            init_prototypes(config.init, config.k, config.net.embed_dim, config.seed.wrapping_add(1))?;
        if init_diagnostics.orthogonal_fallback {
            log::warn!(
                "orthogonal init with k={} > p={}: using a low-coherence frame (max coherence {:.3})",
                config.k,
                config.net.embed_dim,
                init_diagnostics.max_coherence
            );
        }
        Ok(Self {
            net,
            bank,
            config,
            frame_index: 0,
            pretrained: false,
            dims: None,
            global_iteration: 0,
            potentials: None,
            init_diagnostics,
            records: Vec::new(),
            diagnostics: Vec::new(),
        })
    }

    pub fn net(&self) -> &NetParams<f32> {
        &self.net
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    /// Adam on the reconstruction loss alone, `epochs` passes over `flows`.
    /// Returns the loss before each step.
    pub fn pretrain(&mut self, flows: &[FlowField], epochs: usize) -> Result<Vec<f64>> {
        if flows.is_empty() {
            return Err(Error::InvalidParameter(
                "pretraining needs at least one flow frame".into(),
            ));
        }
        let inputs = flows
            .iter()
            .map(|f| {
                self.check_dims(f)?;
                Ok(prepare(f))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut history = Vec::with_capacity(epochs * flows.len());
        for _ in 0..epochs {
            for (image, padded) in &inputs {
                let fwd = self.net.forward_image(padded)?;
                let recon = recon_loss(image, &fwd.recon, fwd.width, fwd.height)?;
                if !recon.value.is_finite() {
                    return Err(Error::NonFinite("reconstruction loss during pretraining".into()));
                }
                history.push(recon.value);
                let d_recon: Vec<f32> = recon.grad.iter().map(|&g| g as f32).collect();
                let d_embedding = vec![0.0f32; fwd.embedding.len()];
                let grads = self.net.backward(&fwd, &d_embedding, &d_recon)?;
                self.net.adam_step(&grads, &self.config.adam)?;
            }
        }
        self.pretrained = true;
        Ok(history)
    }

    pub fn process_frame(&mut self, flow: &FlowField) -> Result<SegmentationMask> {
        self.process_frame_observed(flow, |_| {})
    }

    pub fn process_frame_observed<F>(&mut self, flow: &FlowField, mut observer: F) -> Result<SegmentationMask>
    where
        F: FnMut(&IterationEvent),
    {
        if !self.pretrained {
            return Err(Error::UninitializedState);
        }
        self.check_dims(flow)?;
        let w = self.config.weights;
        let iterations = if self.frame_index == 0 {
            w.t_max
        } else {
            self.config.per_frame_iters
        };
        let (image, padded) = prepare(flow);
        let part = saliency_partition(flow, w.delta)?;
        let mut diag = FrameDiagnostics {
            frame: self.frame_index,
            iterations,
            ..Default::default()
        };

        for iteration in 0..iterations {
            let fwd = self.net.forward_image(&padded)?;
            let raw = EmbeddingMap::from_channel_major(
                &fwd.embedding,
                fwd.grid_width(),
                fwd.grid_height(),
                self.config.net.embed_dim,
            )?;
            let z = l2_normalize(&raw);
            let aff = affinity(&z.map, &self.bank)?;
            let plan = sinkhorn_solve(&aff, w.kappa, &self.config.sinkhorn, self.potentials.as_deref())?;
            diag.max_sinkhorn_iterations = diag.max_sinkhorn_iterations.max(plan.iterations);
            diag.max_sinkhorn_violation = diag.max_sinkhorn_violation.max(plan.violation);
            if plan.violation > self.config.sinkhorn.failure_tolerance {
                // the hardened plan is still usable; a later iteration usually recovers
                log::warn!(
                    "frame {} iteration {iteration}: transport violation {:.2e} after {} iterations",
                    self.frame_index,
                    plan.violation,
                    plan.iterations
                );
                diag.unconverged_solves += 1;
            }
            self.potentials = Some(plan.col_potentials.clone());
            let labels = harden(&plan);
            let bank_after = update_prototypes(&z.map, &labels, &self.bank)?;

            let recon = recon_loss(&image, &fwd.recon, fwd.width, fwd.height)?;
            let pc = proto_loss(&z.map, &labels, &bank_after)?;
            let cc = cluster_contrastive_loss(&z.map, &labels, &bank_after)?;
            let sc = saliency_contrastive_loss(&z.map, &part)?;
            let losses = LossComponents {
                recon: recon.value,
                proto: pc.value,
                cluster: cc.value,
                saliency: sc.value,
            };
            let total = losses.total(&w);
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("loss at frame {}", self.frame_index)));
            }
            observer(&IterationEvent {
                frame: self.frame_index,
                iteration,
                global_iteration: self.global_iteration,
                bank_before: &self.bank,
                bank_after: &bank_after,
                labels: &labels,
                losses,
                total,
            });
            self.records.push(LossRecord {
                iteration: self.global_iteration,
                losses,
                total,
            });
            self.bank = bank_after;
            self.global_iteration += 1;

            let d_norm = combine_embedding_grads(&pc.grad, &cc.grad, &sc.grad, &w);
            let d_raw = l2_normalize_backward(&z, &d_norm);
            let d_embedding = raw.to_channel_major::<f32>(&d_raw);
            let d_recon: Vec<f32> = recon.grad.iter().map(|&g| g as f32).collect();
            let grads = self.net.backward(&fwd, &d_embedding, &d_recon)?;
            self.net.adam_step(&grads, &self.config.adam)?;
        }

        let fwd = self.net.forward_image(&padded)?;
        let raw = EmbeddingMap::from_channel_major(
            &fwd.embedding,
            fwd.grid_width(),
            fwd.grid_height(),
            self.config.net.embed_dim,
        )?;
        let z = l2_normalize(&raw);
        let labels = nearest_prototype(&affinity(&z.map, &self.bank)?);
        let proto_labels = label_prototypes(&self.bank, &part, &z.map, w.eta)?;
        let fg: Vec<bool> = labels.iter().map(|&l| !proto_labels.background[l]).collect();
        let grid = Mask::new(fwd.grid_width(), fwd.grid_height(), fg)?;

        diag.foreground_prototypes = proto_labels.background.iter().filter(|b| !**b).count();
        diag.empty_background = proto_labels.empty_background;
        diag.degenerate_pixels = z.degenerate;
        diag.separation = self.bank.separation_report();
        self.diagnostics.push(diag);
        self.frame_index += 1;
        upsample_mask(&grid, flow.width(), flow.height())
    }

    /// Unnormalized embedding of `flow` under the current network, pixel-major.
    pub fn embed(&self, flow: &FlowField) -> Result<EmbeddingMap> {
        let (_, padded) = prepare(flow);
        let fwd = self.net.forward_image(&padded)?;
        EmbeddingMap::from_channel_major(
            &fwd.embedding,
            fwd.grid_width(),
            fwd.grid_height(),
            self.config.net.embed_dim,
        )
    }

    fn check_dims(&mut self, flow: &FlowField) -> Result<()> {
        let dims = (flow.width(), flow.height());
        match self.dims {
            None => {
                if dims.0 < 2 || dims.1 < 2 {
                    return Err(Error::DimMismatch(format!(
                        "flow of {}x{} is too small",
                        dims.0, dims.1
                    )));
                }
                self.dims = Some(dims);
                Ok(())
            }
            Some(d) if d == dims => Ok(()),
            Some(d) => Err(Error::DimMismatch(format!(
                "frame is {}x{} but the sequence is {}x{}",
                dims.0, dims.1, d.0, d.1
            ))),
        }
    }
}

/// Color-coded image and its reflect-padded copy at a multiple of the grid scale.
fn prepare(flow: &FlowField) -> (FlowImage, FlowImage) {
    let image = flow_to_image(flow);
    let pw = flow.width().div_ceil(GRID_SCALE) * GRID_SCALE;
    let ph = flow.height().div_ceil(GRID_SCALE) * GRID_SCALE;
    let padded = image.reflect_pad(pw, ph);
    (image, padded)
}

/// Labels prototype `j` background iff `P_j . mu_b >= eta`, where `mu_b` is the
/// normalized mean embedding of the background grid set.
pub fn label_prototypes(
    bank: &PrototypeBank,
    part: &SaliencyPartition,
    z: &EmbeddingMap,
    eta: f64,
) -> Result<PrototypeLabels> {
    if part.bg_grid.width() != z.width || part.bg_grid.height() != z.height {
        return Err(Error::DimMismatch("partition grid does not match the embedding".into()));
    }
    if z.dim != bank.dim() {
        return Err(Error::DimMismatch(format!(
            "embedding dimension {} vs prototype dimension {}",
            z.dim,
            bank.dim()
        )));
    }
    let mut mu = vec![0.0; z.dim];
    let mut n = 0usize;
    for (s, _) in part.bg_grid.bits().iter().enumerate().filter(|(_, b)| **b) {
        mu.iter_mut().zip(z.vector(s)).for_each(|(a, b)| *a += b);
        n += 1;
    }
    let norm = dot(&mu, &mu).sqrt();
    if n == 0 || norm == 0.0 {
        log::warn!("empty background set: every prototype is labeled foreground");
        return Ok(PrototypeLabels {
            background: vec![false; bank.k()],
            empty_background: true,
        });
    }
    mu.iter_mut().for_each(|v| *v /= norm);
    Ok(PrototypeLabels {
        background: (0..bank.k()).map(|j| dot(bank.prototype(j), &mu) >= eta).collect(),
        empty_background: false,
    })
}

/// Nearest-neighbor x4 expansion of a grid mask, cropped to `(width, height)`.
///
/// The grid must cover the frame with at most 15 pixels of padding per axis.
pub fn upsample_mask(grid: &Mask, width: usize, height: usize) -> Result<SegmentationMask> {
    let fits = |g: usize, n: usize| g * GRID_SCALE >= n && g * GRID_SCALE < n + 4 * GRID_SCALE;
    if !fits(grid.width(), width) || !fits(grid.height(), height) {
        return Err(Error::DimMismatch(format!(
            "{}x{} grid cannot be expanded to {width}x{height}",
            grid.width(),
            grid.height()
        )));
    }
    let mut out = Mask::empty(width, height);
    for y in 0..height {
        for x in 0..width {
            out.set(x, y, grid.get(x / GRID_SCALE, y / GRID_SCALE));
        }
    }
    Ok(out)
}

/// Pretrains on the first frame, then segments every frame in order.
pub fn segment_sequence(config: SegmenterConfig, flows: &[FlowField]) -> Result<Vec<SegmentationMask>> {
    let Some(first) = flows.first() else {
        return Ok(Vec::new());
    };
    let epochs = config.pretrain_epochs;
    let mut state = SequenceState::new(config)?;
    state.pretrain(std::slice::from_ref(first), epochs)?;
    flows.iter().map(|f| state.process_frame(f)).collect()
}

pub const LOSS_CSV_HEADER: &str = "iteration,L_c,L_pc,L_cc,L_sc,total";

pub fn write_loss_csv<W: Write>(records: &[LossRecord], mut writer: W) -> Result<()> {
    writeln!(writer, "{LOSS_CSV_HEADER}")?;
    for r in records {
        writeln!(
            writer,
            "{},{},{},{},{},{}",
            r.iteration, r.losses.recon, r.losses.proto, r.losses.cluster, r.losses.saliency, r.total
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SegmenterConfig {
        SegmenterConfig {
            k: 4,
            net: NetConfig {
                encoder: [4, 6, 8],
                mlp_hidden: [8, 8],
                embed_dim: 4,
                decoder: [6, 4],
                attention: true,
            },
            weights: LossWeights {
                t_max: 3,
                ..Default::default()
            },
            per_frame_iters: 1,
            pretrain_epochs: 1,
            ..Default::default()
        }
    }

    #[test]
    fn upsample_blocks_and_crop() {
        let grid = Mask::new(2, 2, vec![true, false, false, true]).unwrap();
        let m = upsample_mask(&grid, 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(m.get(x, y), (x < 4) == (y < 4));
            }
        }
        let wide = Mask::empty(216, 1);
        assert_eq!(upsample_mask(&wide, 854, 4).unwrap().width(), 854);
        let small = Mask::empty(8, 8);
        assert!(matches!(upsample_mask(&small, 8, 8), Err(Error::DimMismatch(_))));
        assert!(upsample_mask(&Mask::empty(2, 2), 9, 8).is_err());
    }

    #[test]
    fn label_prototypes_threshold() {
        let bank = PrototypeBank::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut z = EmbeddingMap::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        z.normalized = true;
        let bg = Mask::new(1, 1, vec![true]).unwrap();
        let part = SaliencyPartition {
            fg_mask: bg.complement(),
            bg_mask: bg.clone(),
            m: [0.0; 2],
            m_f: [0.0; 2],
            m_b: [0.0; 2],
            fg_empty: true,
            bg_empty: false,
            fg_grid: bg.complement(),
            bg_grid: bg,
        };
        let labels = label_prototypes(&bank, &part, &z, 0.5).unwrap();
        assert_eq!(labels.background, vec![true, false]);
    }

    #[test]
    fn process_before_pretrain_fails() {
        let mut s = SequenceState::new(tiny_config()).unwrap();
        let f = FlowField::constant(8, 8, [1.0, 0.0]);
        assert!(matches!(s.process_frame(&f), Err(Error::UninitializedState)));
    }

    #[test]
    fn pretrain_zero_epochs_changes_nothing() {
        let mut s = SequenceState::new(tiny_config()).unwrap();
        let before = s.net().clone();
        s.pretrain(&[FlowField::constant(8, 8, [1.0, 0.0])], 0).unwrap();
        assert_eq!(s.net(), &before);
        assert!(s.is_pretrained());
    }

    #[test]
    fn frames_must_share_dimensions() {
        let mut s = SequenceState::new(tiny_config()).unwrap();
        s.pretrain(&[FlowField::constant(8, 8, [1.0, 0.0])], 1).unwrap();
        assert!(s.process_frame(&FlowField::constant(8, 8, [1.0, 0.0])).is_ok());
        assert!(matches!(
            s.process_frame(&FlowField::constant(12, 8, [1.0, 0.0])),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let mut s = SequenceState::new(tiny_config()).unwrap();
        let f = FlowField::constant(11, 9, [0.0, 1.0]);
        s.pretrain(std::slice::from_ref(&f), 1).unwrap();
        let m = s.process_frame(&f).unwrap();
        assert_eq!((m.width(), m.height()), (11, 9));
        assert_eq!(s.records.len(), 3);
    }

    #[test]
    fn loss_csv_layout() {
        let rec = LossRecord {
            iteration: 7,
            losses: LossComponents {
                recon: 1.0,
                proto: 2.0,
                cluster: 3.0,
                saliency: 4.0,
            },
            total: 1.09,
        };
        let mut buf = Vec::new();
        write_loss_csv(&[rec], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iteration,L_c,L_pc,L_cc,L_sc,total\n7,1,2,3,4,1.09\n"
        );
    }
}
