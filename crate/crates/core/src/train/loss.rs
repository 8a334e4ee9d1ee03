use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::LabelMask;

/// Per-pixel cross-entropy over a `[H, W, N_C]` logit graph.
pub struct LossOutput<'t> {
    /// Sum over valid pixels divided by `norm`.
    pub loss: Var<'t>,
    pub valid_pixels: usize,
    /// Set when every pixel carries the ignore value; `loss` is then zero.
    pub all_ignored: bool,
}

pub fn valid_pixels(target: &LabelMask, ignore: u8) -> usize {
    target.data().iter().filter(|&&v| v != ignore).count()
}

/// Cross-entropy summed over non-ignored pixels and divided by `norm`.
/// With `norm` equal to the valid pixel count this is the per-pixel mean.
pub fn cross_entropy_loss<'t>(logits: &Var<'t>, target: &LabelMask, ignore: u8, norm: Option<f64>) -> Result<LossOutput<'t>> {
    let s = logits.shape();
    if s.len() != 3 || (s[0], s[1]) != (target.height(), target.width()) || target.channels() != 1 {
        return Err(Error::shape(format!(
            "logits {s:?} do not match target {}x{}",
            target.height(),
            target.width()
        )));
    }
    let classes = s[2];
    if let Some(&bad) = target
        .data()
        .iter()
        .find(|&&v| v != ignore && usize::from(v) >= classes)
    {
        return Err(Error::input(format!("target label {bad} outside {classes} classes")));
    }
    let valid = valid_pixels(target, ignore);
    if valid == 0 {
        return Ok(LossOutput {
            loss: logits.tape().constant(Tensor::scalar(0.0)),
            valid_pixels: 0,
            all_ignored: true,
        });
    }
    let targets: Vec<u32> = target.data().iter().map(|&v| u32::from(v)).collect();
    let norm = norm.unwrap_or(valid as f64);
    Ok(LossOutput {
        loss: logits.cross_entropy(&targets, u32::from(ignore), norm)?,
        valid_pixels: valid,
        all_ignored: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn uniform_logits_give_log_classes() {
        for n in [2usize, 5, 15] {
            let tape = Tape::new();
            let logits = tape.variable(Tensor::zeros(&[2, 3, n]));
            let target = LabelMask::new(2, 3, 1, vec![0, 1, 1, 0, 1, 0]).unwrap();
            let out = cross_entropy_loss(&logits, &target, 255, None).unwrap();
            assert!((out.loss.value().item() - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn peaked_logits_give_tiny_loss() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[1, 1, 3], vec![0.0, 30.0, 0.0]).unwrap());
        let target = LabelMask::new(1, 1, 1, vec![1]).unwrap();
        let l = cross_entropy_loss(&logits, &target, 255, None).unwrap().loss.value().item();
        assert!((0.0..1e-9).contains(&l));
    }

    #[test]
    fn two_pixel_hand_computation() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 0.5, -0.5]).unwrap());
        let target = LabelMask::new(1, 2, 1, vec![0, 1]).unwrap();
        let l = cross_entropy_loss(&logits, &target, 255, None).unwrap().loss.value().item();
        let p0 = -(1f64.exp() / (1f64.exp() + 2f64.exp())).ln();
        let p1 = -((-0.5f64).exp() / (0.5f64.exp() + (-0.5f64).exp())).ln();
        assert!((l - (p0 + p1) / 2.0).abs() < 1e-10);
    }

    #[test]
    fn all_ignored_is_flagged_zero() {
        let tape = Tape::new();
        let logits = tape.variable(Tensor::zeros(&[1, 2, 3]));
        let target = LabelMask::new(1, 2, 1, vec![255, 255]).unwrap();
        let out = cross_entropy_loss(&logits, &target, 255, None).unwrap();
        assert!(out.all_ignored);
        assert_eq!(out.loss.value().item(), 0.0);
    }

    #[test]
    fn out_of_range_target_is_input_error() {
        let tape = Tape::new();
        let logits = tape.variable(Tensor::zeros(&[1, 1, 3]));
        let target = LabelMask::new(1, 1, 1, vec![3]).unwrap();
        assert!(matches!(
            cross_entropy_loss(&logits, &target, 255, None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn gradient_is_softmax_minus_onehot_and_zero_on_ignored() {
        let vals = vec![0.3, -1.2, 2.0, 0.0, 0.5, 0.5, 1.0, 1.0, -3.0];
        let tape = Tape::new();
        let logits = tape.variable(Tensor::new(&[1, 3, 3], vals.clone()).unwrap());
        let target = LabelMask::new(1, 3, 1, vec![2, 255, 0]).unwrap();
        let out = cross_entropy_loss(&logits, &target, 255, None).unwrap();
        assert_eq!(out.valid_pixels, 2);
        let g = tape.backward(out.loss).unwrap();
        let g = g.get(logits).unwrap().data().to_vec();
        for (px, label) in [(0usize, Some(2usize)), (1, None), (2, Some(0))] {
            let row = &vals[px * 3..px * 3 + 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..3 {
                let want = match label {
                    Some(l) => (row[c].exp() / z - if c == l { 1.0 } else { 0.0 }) / 2.0,
                    None => 0.0,
                };
                assert!((g[px * 3 + c] - want).abs() < 1e-12);
            }
        }
    }
}
