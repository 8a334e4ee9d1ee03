//! Rotation-aggregative similarity computation.
//!
//! Every orientation view of the image is encoded, its deepest token grid is
//! compared against the class embeddings by cosine similarity, the resulting
//! maps are embedded into `d_F` channels, rotated back into the frame of the
//! original image, and the aligned slices are fused into the initial
//! semantic map stack.
//!
//! Tensor layouts used here (no batch axis):
//! * similarity stack: `[N_A, N_C, h, w]`
//! * embedded stack:   `[N_A, N_C, h, w, d_F]`
//! * semantic maps:    `[N_C, h, w, d_F]`

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::grid::{rotation_source, ImageGrid, Orientation, COSINE_EPS};
use crate::nn::{Ctx, Linear, ParamStore};

/// Ordered, duplicate-free orientation list beginning with the identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Orientation>", into = "Vec<Orientation>")]
pub struct OrientationConfig {
    orientations: Vec<Orientation>,
}

impl OrientationConfig {
    pub fn new(orientations: Vec<Orientation>) -> Result<Self> {
        if orientations.first() != Some(&Orientation::IDENTITY) {
            return Err(Error::config("orientation list must start with 0"));
        }
        for (i, o) in orientations.iter().enumerate() {
            if orientations[..i].contains(o) {
                return Err(Error::config(format!(
                    "orientation {} listed twice",
                    o.quarter_turns()
                )));
            }
        }
        Ok(Self { orientations })
    }

    pub fn from_turns(turns: &[u8]) -> Result<Self> {
        Self::new(
            turns
                .iter()
                .map(|&t| Orientation::new(t).map_err(|e| Error::config(e.to_string())))
                .collect::<Result<_>>()?,
        )
    }

    /// Only the original view.
    pub fn single() -> Self {
        Self {
            orientations: vec![Orientation::IDENTITY],
        }
    }

    pub fn orientations(&self) -> &[Orientation] {
        &self.orientations
    }

    pub fn len(&self) -> usize {
        self.orientations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orientations.is_empty()
    }
}

impl Default for OrientationConfig {
    fn default() -> Self {
        Self {
            orientations: Orientation::all().to_vec(),
        }
    }
}

impl TryFrom<Vec<Orientation>> for OrientationConfig {
    type Error = Error;

    fn try_from(v: Vec<Orientation>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<OrientationConfig> for Vec<Orientation> {
    fn from(c: OrientationConfig) -> Self {
        c.orientations
    }
}

/// View `k` is the image rotated by `cfg.orientations()[k]`.
pub fn generate_rotated_views(image: &ImageGrid, cfg: &OrientationConfig) -> Result<Vec<ImageGrid>> {
    if !image.is_square() {
        return Err(Error::shape(format!(
            "rotation views need a square image, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    cfg.orientations().iter().map(|&t| image.rotate(t)).collect()
}

/// Cosine similarities between every view's tokens (`[h, w, d]` each) and
/// every class embedding (`classes`: `[N_C, d]`), as `[N_A, N_C, h, w]`.
pub fn compute_orientation_similarities<'t>(features: &[Var<'t>], classes: &Var<'t>) -> Result<Var<'t>> {
    let first = features
        .first()
        .ok_or_else(|| Error::shape("no feature grids for similarity"))?
        .shape();
    let cs = classes.shape();
    if cs.len() != 2 || cs[0] == 0 {
        return Err(Error::shape(format!("class embeddings must be [N_C, d], got {cs:?}")));
    }
    if first.len() != 3 || first[2] != cs[1] {
        return Err(Error::shape(format!(
            "feature grid {first:?} does not match embedding width {}",
            cs[1]
        )));
    }
    let (h, w, n_c) = (first[0], first[1], cs[0]);
    let class_t = classes.l2_normalize(COSINE_EPS)?.transpose_last()?;
    let slices = features
        .iter()
        .map(|f| {
            if f.shape() != first {
                return Err(Error::shape(format!(
                    "orientation views disagree in shape: {:?} vs {first:?}",
                    f.shape()
                )));
            }
            f.l2_normalize(COSINE_EPS)?
                .linear(&class_t, None)?
                .clamp(-1.0, 1.0)
                .permute(&[2, 0, 1])?
                .reshape(&[1, n_c, h, w])
        })
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&slices, 0)
}

/// Flat `h·w` gather indices that rotate a square grid by `turns`.
pub(crate) fn rotation_gather(side: usize, turns: Orientation) -> Vec<usize> {
    (0..side * side)
        .map(|p| {
            let (r, c) = rotation_source(p / side, p % side, side, turns);
            r * side + c
        })
        .collect()
}

/// Learned part of the similarity pathway: the similarity embedding and the
/// orientation fusion.
#[derive(Debug, Clone)]
pub struct RotSim {
    cfg: OrientationConfig,
    kernel: usize,
    d_f: usize,
    embed: Linear,
    fuse: Linear,
}

impl RotSim {
    /// `kernel` is the spatial size of the similarity embedding (1 or 3).
    pub fn new(store: &mut ParamStore, cfg: OrientationConfig, kernel: usize, d_f: usize) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::config(format!(
                "similarity embedding kernel must be odd, got {kernel}"
            )));
        }
        if d_f == 0 {
            return Err(Error::config("d_F must be positive"));
        }
        let embed = Linear::new(store, "rotsim.embed", kernel * kernel, d_f)?;
        let fuse = Linear::new(store, "rotsim.fuse", cfg.len() * d_f, d_f)?;
        Ok(Self {
            cfg,
            kernel,
            d_f,
            embed,
            fuse,
        })
    }

    pub fn config(&self) -> &OrientationConfig {
        &self.cfg
    }

    pub fn d_f(&self) -> usize {
        self.d_f
    }

    /// `[N_A, N_C, h, w] -> [N_A, N_C, h, w, d_F]` with one shared
    /// single-input-channel convolution.
    pub fn embed_similarities<'t>(&self, cx: &Ctx<'t>, sims: Var<'t>) -> Result<Var<'t>> {
        if sims.rank() != 4 {
            return Err(Error::shape(format!("similarity stack must be rank 4, got {:?}", sims.shape())));
        }
        let taps = if self.kernel == 1 {
            let mut s = sims.shape();
            s.push(1);
            sims.reshape(&s)?
        } else {
            sims.unfold(self.kernel)?
        };
        self.embed.forward(cx, taps)
    }

    /// Rotates each orientation slice back into the original frame.
    pub fn align<'t>(&self, embedded: Var<'t>) -> Result<Vec<Var<'t>>> {
        let s = embedded.shape();
        if s.len() != 5 || s[0] != self.cfg.len() {
            return Err(Error::shape(format!(
                "embedded stack {s:?} does not match {} orientations",
                self.cfg.len()
            )));
        }
        let (n_c, h, w, d) = (s[1], s[2], s[3], s[4]);
        if h != w {
            return Err(Error::shape(format!("alignment needs square maps, got {h}x{w}")));
        }
        self.cfg
            .orientations()
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let slice = embedded.narrow(0, k, 1)?.reshape(&[n_c, h, w, d])?;
                if t == Orientation::IDENTITY {
                    return Ok(slice);
                }
                slice
                    .reshape(&[n_c, h * w, d])?
                    .index_select(1, &rotation_gather(h, t.inverse()))?
                    .reshape(&[n_c, h, w, d])
            })
            .collect()
    }

    /// Concatenates aligned slices on the feature axis and fuses to `d_F`.
    pub fn fuse<'t>(&self, cx: &Ctx<'t>, aligned: &[Var<'t>]) -> Result<Var<'t>> {
        if aligned.len() != self.cfg.len() {
            return Err(Error::shape(format!(
                "{} aligned slices for {} orientations",
                aligned.len(),
                self.cfg.len()
            )));
        }
        let cat = Var::concat(aligned, 3)?;
        self.fuse.forward(cx, cat)
    }

    /// Per-view deepest features and class embeddings to the initial
    /// semantic map stack `[N_C, h, w, d_F]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, view_features: &[Var<'t>], classes: &Var<'t>) -> Result<Var<'t>> {
        if view_features.len() != self.cfg.len() {
            return Err(Error::shape(format!(
                "{} views for {} orientations",
                view_features.len(),
                self.cfg.len()
            )));
        }
        let sims = compute_orientation_similarities(view_features, classes)?;
        let embedded = self.embed_similarities(cx, sims)?;
        let aligned = self.align(embedded)?;
        self.fuse(cx, &aligned)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::backbone::{MockVisionEncoder, VisionEncoder};
    use crate::grid::FeatureGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn orientation_config_rules() {
        assert!(OrientationConfig::from_turns(&[1, 0]).is_err());
        assert!(OrientationConfig::from_turns(&[0, 2, 2]).is_err());
        assert!(OrientationConfig::from_turns(&[]).is_err());
        assert_eq!(OrientationConfig::default().len(), 4);
        let parsed: OrientationConfig = serde_json::from_str("[0, 2]").unwrap();
        assert_eq!(parsed.len(), 2);
        assert!(serde_json::from_str::<OrientationConfig>("[0, 5]").is_err());
    }

    #[test]
    fn views() {
        let img = ImageGrid::from_rgb(2, 2, (0..12).map(|v| v as f32 / 12.0).collect()).unwrap();
        let one = generate_rotated_views(&img, &OrientationConfig::single()).unwrap();
        assert_eq!(one, vec![img.clone()]);
        let all = generate_rotated_views(&img, &OrientationConfig::default()).unwrap();
        // [[a,b],[c,d]] -> [[b,d],[a,c]]
        assert_eq!(all[1].pixel(0, 0), img.pixel(0, 1));
        assert_eq!(all[1].pixel(0, 1), img.pixel(1, 1));
        assert_eq!(all[1].pixel(1, 0), img.pixel(0, 0));
        assert_eq!(all[1].pixel(1, 1), img.pixel(1, 0));
        let flat = ImageGrid::from_rgb(4, 4, vec![0.3; 48]).unwrap();
        let v = generate_rotated_views(&flat, &OrientationConfig::default()).unwrap();
        assert!(v.iter().all(|x| x == &flat));
        let wide = ImageGrid::from_rgb(2, 4, vec![0.0; 24]).unwrap();
        assert!(matches!(
            generate_rotated_views(&wide, &OrientationConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn similarities_match_brute_force() {
        let tape = Tape::new();
        let feats = [
            1.0, 0.0, 0.0, /**/ 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, /**/ 1.0, 1.0, 1.0,
        ];
        let classes = [1.0, 0.0, 0.0, /**/ 0.6, 0.8, 0.0];
        let f = tape.constant(Tensor::new(&[2, 2, 3], feats.to_vec()).unwrap());
        let c = tape.constant(Tensor::new(&[2, 3], classes.to_vec()).unwrap());
        let sims = compute_orientation_similarities(&[f], &c).unwrap().value();
        assert_eq!(sims.shape(), &[1, 2, 2, 2]);
        for j in 0..2 {
            for p in 0..4 {
                let a = &feats[p * 3..][..3];
                let b = &classes[j * 3..][..3];
                let want = crate::grid::cosine_similarity(a, b, COSINE_EPS);
                assert!((sims.data()[j * 4 + p] - want).abs() < 1e-12);
            }
        }
        assert_eq!(sims.data()[0], 1.0);
        assert_eq!(sims.data()[1], 0.0);
        assert_eq!(sims.data()[2], 0.0);

        let bad = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(compute_orientation_similarities(&[f], &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn pointwise_embedding_closed_form() {
        let mut store = ParamStore::new(1);
        let rs = RotSim::new(&mut store, OrientationConfig::single(), 1, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let sims = random(&[1, 2, 3, 3], &mut rng);
        let out = rs.embed_similarities(&cx, cx.constant(sims.clone())).unwrap().value();
        let w = store.value("rotsim.embed.weight").unwrap().data().to_vec();
        let b = store.value("rotsim.embed.bias").unwrap().data().to_vec();
        for (i, s) in sims.data().iter().enumerate() {
            for ch in 0..4 {
                let want = s * w[ch] + b[ch];
                assert!((out.data()[i * 4 + ch] - want).abs() < 1e-12);
            }
        }
        // Identical category planes embed identically.
        let plane = random(&[1, 1, 3, 3], &mut rng);
        let twice = Tensor::new(&[1, 2, 3, 3], [plane.data(), plane.data()].concat()).unwrap();
        let e = rs.embed_similarities(&cx, cx.constant(twice)).unwrap().value();
        assert_eq!(e.data()[..36], e.data()[36..]);
    }

    #[test]
    fn zero_similarity_with_zero_bias_embeds_to_zero() {
        let mut store = ParamStore::new(1);
        let rs = RotSim::new(&mut store, OrientationConfig::single(), 3, 4).unwrap();
        store
            .set("rotsim.embed.bias", Tensor::zeros(&[4]))
            .unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let out = rs
            .embed_similarities(&cx, cx.constant(Tensor::zeros(&[1, 2, 3, 3])))
            .unwrap()
            .value();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aligned_slices_agree_under_mock_backbone() {
        let enc = MockVisionEncoder::new(
            crate::backbone::BackboneSpec {
                patch_size: 4,
                ..Default::default()
            },
            42,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = ImageGrid::from_rgb(24, 24, (0..24 * 24 * 3).map(|_| rng.random::<f32>()).collect()).unwrap();
        let cfg = OrientationConfig::default();
        let mut store = ParamStore::new(9);
        let rs = RotSim::new(&mut store, cfg.clone(), 1, 8).unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let views = generate_rotated_views(&img, &cfg).unwrap();
        let feats: Vec<Var> = views
            .iter()
            .map(|v| {
                let g: FeatureGrid = enc.encode_image_multilevel(v).unwrap().pop().unwrap();
                cx.constant(Tensor::new(&[6, 6, 64], g.into_data()).unwrap())
            })
            .collect();
        let classes = cx.constant(random(&[3, 64], &mut rng));
        let sims = compute_orientation_similarities(&feats, &classes).unwrap();
        let aligned = rs.align(rs.embed_similarities(&cx, sims).unwrap()).unwrap();
        let base = aligned[0].value();
        for a in &aligned[1..] {
            assert!(a.value().max_abs_diff(&base) < 1e-12);
        }
        let m = rs.fuse(&cx, &aligned).unwrap();
        assert_eq!(m.shape(), vec![3, 6, 6, 8]);
    }

    #[test]
    fn fusion_of_single_orientation_is_pointwise() {
        let mut store = ParamStore::new(2);
        let rs = RotSim::new(&mut store, OrientationConfig::single(), 1, 2).unwrap();
        store
            .set("rotsim.fuse.weight", Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        store.set("rotsim.fuse.bias", Tensor::zeros(&[2])).unwrap();
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 3, 3, 2], &mut rng);
        let out = rs.fuse(&cx, &[cx.constant(x.clone())]).unwrap().value();
        assert_eq!(out.data(), x.data());
    }
}
