//! The complete network: features, initialization, `K` GRU iterations
//! and upsampling, unrolled on one tape.

use itermvs_tensor::{Bound, ParamStore, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{MvsError, Result};
use crate::estimator::{generate_hypotheses, inverse_samples, EstimatorNet, IterationOutput};
use crate::features::FeatureNet;
use crate::geometry::{relative_pose, Camera, CameraView, Warper};
use crate::matching::{quarter_positions, sample_reference, view_similarity, MatchingNet, SourceView};
use crate::upsample::{upsample_confidence, UpsampleNet};

/// Views for one forward pass; index 0 is the reference.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    pub cameras: Vec<Camera>,
    /// `[3, H, W]` per view.
    pub images: Vec<Tensor<T>>,
}

impl<T: Real> ModelInput<T> {
    pub fn from_views(views: &[CameraView]) -> Self {
        ModelInput {
            cameras: views.iter().map(|v| v.camera.clone()).collect(),
            images: views.iter().map(|v| v.image.cast()).collect(),
        }
    }

    pub fn reference(&self) -> &Camera {
        &self.cameras[0]
    }

    pub fn size(&self) -> (usize, usize) {
        let d = self.images[0].dims();
        (d[1], d[2])
    }
}

/// Everything the forward pass produces, as tape variables.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `(H, W)` of the input.
    pub full: (usize, usize),
    /// `(H / 4, W / 4)`.
    pub quarter: (usize, usize),
    /// `[H/8 * W/8]` depth from the initialization volume.
    pub init_depth_coarse: Var,
    /// The same, bilinearly upsampled to `[H/4 * W/4]`.
    pub init_depth: Var,
    /// Per source view, `[H/8 * W/8]`.
    pub view_weights: Vec<Var>,
    /// `k = 0..=K`.
    pub iterations: Vec<IterationOutput>,
    /// `[H, W]`.
    pub depth_full: Var,
    /// `[H, W]`.
    pub confidence_full: Var,
}

impl Prediction {
    pub fn last(&self) -> &IterationOutput {
        self.iterations.last().expect("at least the k = 0 prediction")
    }
}

#[derive(Clone, Debug)]
pub struct IterMvs {
    pub cfg: ModelConfig,
    pub features: FeatureNet,
    pub matching: MatchingNet,
    pub estimator: EstimatorNet,
    pub upsample: UpsampleNet,
}

impl IterMvs {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(IterMvs {
            features: FeatureNet::default(),
            matching: MatchingNet::new(cfg.groups, cfg.d1, cfg.level_counts, cfg.unet_base),
            estimator: EstimatorNet::new(&cfg),
            upsample: UpsampleNet::default(),
            cfg,
        })
    }

    /// Seeded initial parameters.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.features.register(&mut store, &mut rng)?;
        self.matching.register(&mut store, &mut rng)?;
        self.estimator.register(&mut store, &mut rng)?;
        self.upsample.register(&mut store, &mut rng)?;
        Ok(store)
    }

    fn check_input<T: Real>(&self, input: &ModelInput<T>) -> Result<()> {
        if input.cameras.len() < 2 || input.cameras.len() != input.images.len() {
            return Err(MvsError::Config(format!(
                "need a reference and at least one source view, got {} cameras and {} images",
                input.cameras.len(),
                input.images.len()
            )));
        }
        let d0 = input.images[0].dims();
        if d0.len() != 3 || d0[0] != 3 || !d0[1].is_multiple_of(8) || !d0[2].is_multiple_of(8) {
            return Err(MvsError::Config(format!("image {d0:?} must be [3, H, W] with H, W multiples of 8")));
        }
        if input.images.iter().any(|im| im.dims() != d0) {
            return Err(MvsError::Config("all views must share the image size".into()));
        }
        Ok(())
    }

    /// Runs initialization and `iters` GRU iterations.
    pub fn forward<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, input: &ModelInput<T>, iters: usize) -> Result<Prediction> {
        self.check_input(input)?;
        let cfg = &self.cfg;
        let (h, w) = input.size();
        let (h4, w4, h8, w8) = (h / 4, w / 4, h / 8, w / 8);
        let reference = input.reference();
        let range = (reference.d_min, reference.d_max);

        let pyramids = input
            .images
            .iter()
            .map(|im| {
                let x = tape.constant(im.clone());
                self.features.extract(tape, p, x)
            })
            .collect::<Result<Vec<_>>>()?;
        let sources: Vec<SourceView> = input.cameras[1..]
            .iter()
            .zip(&pyramids[1..])
            .map(|(cam, f)| {
                let pose = relative_pose(reference, cam);
                let warper = |l: i32| {
                    let s = 0.5f64.powi(l);
                    Warper::new(&reference.rescaled(s).k, &cam.rescaled(s).k, &pose)
                };
                SourceView {
                    features: *f,
                    warpers: [warper(1), warper(2), warper(3)],
                }
            })
            .collect();
        let reference_features = pyramids[0];

        // Initialization on the level-3 lattice.
        let p8 = h8 * w8;
        let (px8, py8): (Vec<f64>, Vec<f64>) = (0..p8).map(|i| ((i % w8) as f64, (i / w8) as f64)).unzip();
        let inv_init = inverse_samples(range.0, range.1, cfg.d1);
        let hyp_init = tape.constant(Tensor::from_fn([cfg.d1, p8], |i| T::one() / T::c(inv_init[i / p8])));
        let f0_3 = tape.reshape(reference_features.level(3), [64, p8])?;
        let mut sims = Vec::with_capacity(sources.len());
        let mut view_weights = Vec::with_capacity(sources.len());
        for src in &sources {
            let sim = view_similarity(tape, 3, f0_3, hyp_init, &px8, &py8, src, cfg.groups)?;
            let (wv, _) = self.matching.view_weight(tape, p, &sim, (h8, w8))?;
            sims.push(sim.s);
            view_weights.push(wv);
        }
        let s_init = crate::ops::integrate(tape, &sims, &view_weights)?;
        let s_bar = self.matching.aggregate(tape, p, None, s_init, (h8, w8))?;
        let init_depth_coarse = self.estimator.initial_depth(tape, s_bar, &inv_init)?;
        let init_depth = {
            let d = tape.reshape(init_depth_coarse, [1, h8, w8])?;
            let d = tape.resize_bilinear(d, h4, w4)?;
            tape.reshape(d, [h4 * w4])?
        };
        let mut hidden = self.estimator.init_hidden(tape, p, s_bar)?;

        let weights_up = view_weights
            .iter()
            .map(|&wv| {
                let x = tape.reshape(wv, [1, h8, w8])?;
                let x = tape.resize_bilinear(x, h4, w4)?;
                Ok(tape.reshape(x, [h4 * w4])?)
            })
            .collect::<Result<Vec<_>>>()?;
        let pos = [1, 2, 3].map(|l| quarter_positions(h4, w4, l));
        let mut f0 = [hidden; 3];
        for l in 1..=3 {
            let (px, py) = &pos[l - 1];
            f0[l - 1] = sample_reference(tape, reference_features.level(l), px, py)?;
        }

        let mut iterations = vec![self.estimator.predict(tape, p, hidden, range)?];
        for _ in 0..iters {
            let eta = iterations.last().expect("k = 0 exists").eta;
            let mut hyps = [eta; 3];
            for l in 1..=3 {
                hyps[l - 1] = generate_hypotheses(tape, eta, &cfg.level_offsets(l), range.0, range.1)?;
            }
            let sim = self
                .matching
                .multiscale_similarity(tape, p, &sources, &f0, &pos, &hyps, &weights_up, (h4, w4))?;
            let eta_map = tape.reshape(eta, [1, 1, h4, w4])?;
            let x = tape.concat(&[eta_map, sim], 1)?;
            hidden = self.estimator.gru_update(tape, p, hidden, x)?;
            iterations.push(self.estimator.predict(tape, p, hidden, range)?);
        }

        let last = iterations.last().expect("k = 0 exists");
        let depth_full = self
            .upsample
            .upsample_depth(tape, p, reference_features.level(2), last.depth, (h4, w4))?;
        let confidence_full = upsample_confidence(tape, last.confidence, (h4, w4))?;
        Ok(Prediction {
            full: (h, w),
            quarter: (h4, w4),
            init_depth_coarse,
            init_depth,
            view_weights,
            iterations,
            depth_full,
            confidence_full,
        })
    }
}
