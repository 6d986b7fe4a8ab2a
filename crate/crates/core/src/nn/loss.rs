use super::tensor::{Scalar, Tensor5};
use crate::error::{Error, Result};

/// Mean absolute error over masked voxels × channels and its subgradient
/// (zero at ties). `mask` holds one spatial mask per batch item, shared by
/// that item's channels. Returns `None` when the mask is empty, meaning skip
/// the block.
pub fn l1_loss_masked<T: Scalar>(pred: &Tensor5<T>, target: &Tensor5<T>, mask: &[bool]) -> Result<Option<(T, Tensor5<T>)>> {
    if pred.shape() != target.shape() || mask.len() != pred.batch() * pred.voxels() {
        return Err(Error::Shape(format!(
            "loss: pred {:?}, target {:?}, mask {}",
            pred.shape(),
            target.shape(),
            mask.len()
        )));
    }
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Ok(None);
    }
    let c = pred.channels();
    let n = pred.batch();
    let count = T::of((active * c) as f64);
    let vox = pred.voxels();
    let mut loss = T::zero();
    let mut grad = Tensor5::zeros(pred.shape());
    let step = T::one() / count;
    for b in 0..n {
        for ch in 0..c {
            let mut part = T::zero();
            let g = grad.channel_mut(b, ch);
            for (((gv, &p), &t), &m) in g.iter_mut().zip(pred.channel(b, ch)).zip(target.channel(b, ch)).zip(&mask[b * vox..(b + 1) * vox]) {
                if m {
                    let d = p - t;
                    part += d.abs();
                    *gv = if d > T::zero() {
                        step
                    } else if d < T::zero() {
                        -step
                    } else {
                        T::zero()
                    };
                }
            }
            loss += part;
        }
    }
    Ok(Some((loss / count, grad)))
}

/// Loss only, for validation.
pub fn l1_value_masked<T: Scalar>(pred: &Tensor5<T>, target: &Tensor5<T>, mask: &[bool]) -> Result<Option<T>> {
    Ok(l1_loss_masked(pred, target, mask)?.map(|(l, _)| l))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_by_one() {
        let t = Tensor5::from_vec([1, 2, 1, 1, 3], vec![0.0f64, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let mut p = t.clone();
        p.data_mut().iter_mut().for_each(|v| *v += 1.0);
        let mask = [true, false, true];
        let (l, g) = l1_loss_masked(&p, &t, &mask).unwrap().unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g.data(), &[0.25, 0.0, 0.25, 0.25, 0.0, 0.25]);
        let (l, g) = l1_loss_masked(&t, &t, &mask).unwrap().unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(l1_loss_masked(&p, &t, &[false; 3]).unwrap().is_none());
    }
}
