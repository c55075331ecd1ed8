//! Dense descriptor matching.
//!
//! The correlation layer turns two `h x w x d` descriptor maps into an
//! `h x w x (h*w)` similarity volume: position `(i, j)` holds the scalar
//! products between the image-B descriptor at `(i, j)` and *every* image-A
//! descriptor. Channel `k` addresses A-position `(row, col)` through the
//! column-major flattening `k = col * h + row` (zero-based).
//!
//! Normalization (ReLU then per-location channel L2) amplifies unambiguous
//! matches and down-weights descriptors that correlate with many locations,
//! mirroring the second-nearest-neighbor test of classical matching.
//! Concatenation and subtraction variants are kept as baselines.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Norm guard for correspondence normalization: all-nonpositive channel
/// vectors map to zero instead of dividing by ~0.
pub const CORRELATION_EPSILON: Scalar = 1e-8;

/// Flatten A-position `(row, col)` of an `h`-row map into a channel index.
pub fn flatten_index(row: usize, col: usize, h: usize) -> usize {
    col * h + row
}

/// Inverse of [`flatten_index`]: channel index to `(row, col)`.
pub fn unflatten_index(k: usize, h: usize) -> (usize, usize) {
    (k % h, k / h)
}

fn check_same_maps(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "feature maps must share a shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ab, _) = a.as_batched()?;
    let (n, h, w, d) = ab.dims4()?;
    if d == 0 {
        return Err(Error::invalid("descriptor dimension must be >= 1"));
    }
    Ok((n, h, w, d))
}

pub(crate) fn correlate_forward(f_a: &Tensor, f_b: &Tensor) -> Result<Tensor> {
    let (n, h, w, d) = check_same_maps(f_a, f_b)?;
    let squeeze = f_a.rank() == 3;
    let (a4, _) = f_a.as_batched()?;
    let (b4, _) = f_b.as_batched()?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, h, w, hw]);
    let ad = a4.data();
    let bd = b4.data();
    // One chunk per (batch, i) row of the output volume.
    par::for_each_chunk_mut(out.data_mut(), w * hw, |row, chunk| {
        let bi = row / h;
        let i = row % h;
        for j in 0..w {
            let b_base = ((bi * h + i) * w + j) * d;
            let bvec = &bd[b_base..b_base + d];
            let crow = &mut chunk[j * hw..(j + 1) * hw];
            for k in 0..hw {
                let (rk, ck) = unflatten_index(k, h);
                let a_base = ((bi * h + rk) * w + ck) * d;
                let avec = &ad[a_base..a_base + d];
                let mut acc = 0.0;
                for t in 0..d {
                    acc += bvec[t] * avec[t];
                }
                crow[k] = acc;
            }
        }
    });
    if squeeze {
        out.reshaped(&[h, w, hw])
    } else {
        Ok(out)
    }
}

/// Correlation layer on the tape; differentiable w.r.t. both feature maps.
pub fn correlate(tape: &mut Tape, f_a: Var, f_b: Var) -> Result<Var> {
    let a = tape.value(f_a).clone();
    let b = tape.value(f_b).clone();
    let (n, h, w, d) = check_same_maps(&a, &b)?;
    let out = correlate_forward(&a, &b)?;
    let squeeze = a.rank() == 3;
    let hw = h * w;
    Ok(tape.push_op(out, &[f_a, f_b], move || {
        Box::new(move |g, sink| {
            let gd = g.data();
            let (a4, _) = a.as_batched().expect("validated");
            let (b4, _) = b.as_batched().expect("validated");
            let ad = a4.data();
            let bd = b4.data();

            // dB[bi,i,j,:] = sum_k g[bi,i,j,k] * A[bi,unflatten(k),:]
            let mut dbv = Tensor::zeros(&[n, h, w, d]);
            par::for_each_chunk_mut(dbv.data_mut(), w * d, |row, chunk| {
                let bi = row / h;
                let i = row % h;
                for j in 0..w {
                    let g_base = ((bi * h + i) * w + j) * hw;
                    let drow = &mut chunk[j * d..(j + 1) * d];
                    for k in 0..hw {
                        let gv = gd[g_base + k];
                        if gv == 0.0 {
                            continue;
                        }
                        let (rk, ck) = unflatten_index(k, h);
                        let a_base = ((bi * h + rk) * w + ck) * d;
                        for t in 0..d {
                            drow[t] += gv * ad[a_base + t];
                        }
                    }
                }
            });

            // dA[bi,r,c,:] = sum_{i,j} g[bi,i,j,flatten(r,c)] * B[bi,i,j,:]
            let mut dav = Tensor::zeros(&[n, h, w, d]);
            par::for_each_chunk_mut(dav.data_mut(), w * d, |row, chunk| {
                let bi = row / h;
                let r = row % h;
                for c in 0..w {
                    let k = flatten_index(r, c, h);
                    let drow = &mut chunk[c * d..(c + 1) * d];
                    for i in 0..h {
                        for j in 0..w {
                            let gv = gd[((bi * h + i) * w + j) * hw + k];
                            if gv == 0.0 {
                                continue;
                            }
                            let b_base = ((bi * h + i) * w + j) * d;
                            for t in 0..d {
                                drow[t] += gv * bd[b_base + t];
                            }
                        }
                    }
                }
            });

            let (dav, dbv) = if squeeze {
                (
                    dav.reshaped(&[h, w, d]).expect("squeeze"),
                    dbv.reshaped(&[h, w, d]).expect("squeeze"),
                )
            } else {
                (dav, dbv)
            };
            sink.add(f_a, dav);
            sink.add(f_b, dbv);
        })
    }))
}

/// ReLU followed by per-location channel L2 normalization:
/// `v -> relu(v) / max(||relu(v)||, epsilon)`.
pub fn normalize_correspondences(tape: &mut Tape, corr: Var, epsilon: Scalar) -> Result<Var> {
    let x = tape.value(corr).clone();
    if x.rank() != 3 && x.rank() != 4 {
        return Err(Error::invalid(format!(
            "correspondence volume must be rank 3 or 4, got {:?}",
            x.shape()
        )));
    }
    let channels = *x.shape().last().unwrap();
    let locations = x.len() / channels;
    let mut out = Tensor::zeros(x.shape());
    let mut norms = vec![0.0; locations];
    {
        let xd = x.data();
        let od = out.data_mut();
        for loc in 0..locations {
            let base = loc * channels;
            let mut sq = 0.0;
            for t in 0..channels {
                let r = xd[base + t].max(0.0);
                sq += r * r;
            }
            let nrm = sq.sqrt();
            norms[loc] = nrm;
            let denom = nrm.max(epsilon);
            for t in 0..channels {
                od[base + t] = xd[base + t].max(0.0) / denom;
            }
        }
    }
    let y = out.clone();
    Ok(tape.push_op(out, &[corr], move || {
        Box::new(move |g, sink| {
            let gd = g.data();
            let xd = x.data();
            let yd = y.data();
            let mut dx = vec![0.0; xd.len()];
            for loc in 0..locations {
                let base = loc * channels;
                let nrm = norms[loc];
                if nrm >= epsilon {
                    // y = r / ||r||: gradient projected off y, gated by relu.
                    let mut dot = 0.0;
                    for t in 0..channels {
                        dot += yd[base + t] * gd[base + t];
                    }
                    for t in 0..channels {
                        if xd[base + t] > 0.0 {
                            dx[base + t] = (gd[base + t] - yd[base + t] * dot) / nrm;
                        }
                    }
                } else {
                    // y = r / epsilon: linear in the positive part.
                    for t in 0..channels {
                        if xd[base + t] > 0.0 {
                            dx[base + t] = gd[base + t] / epsilon;
                        }
                    }
                }
            }
            sink.add(corr, Tensor::from_vec(x.shape(), dx).expect("norm grad"));
        })
    }))
}

/// Baseline variant: channelwise stack of `f_B` over `f_A` (`[.., 2d]`).
pub fn match_concat(tape: &mut Tape, f_a: Var, f_b: Var) -> Result<Var> {
    check_same_maps(tape.value(f_a), tape.value(f_b))?;
    tape.concat_last_axis(f_b, f_a)
}

/// Baseline variant: elementwise difference `f_B - f_A`.
pub fn match_subtract(tape: &mut Tape, f_a: Var, f_b: Var) -> Result<Var> {
    check_same_maps(tape.value(f_a), tape.value(f_b))?;
    tape.sub(f_b, f_a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flatten_roundtrip_all_indices() {
        let (h, w) = (5, 7);
        for k in 0..h * w {
            let (r, c) = unflatten_index(k, h);
            assert!(r < h && c < w);
            assert_eq!(flatten_index(r, c, h), k);
        }
    }

    #[test]
    fn self_correlation_of_unit_vectors_peaks_at_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = Tensor::rand_uniform(&[3, 4, 6], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(raw);
        let f = tape.l2_normalize(v, 2, 1e-8).unwrap();
        let c = correlate(&mut tape, f, f).unwrap();
        let (h, w) = (3, 4);
        let cd = tape.value(c).data();
        for i in 0..h {
            for j in 0..w {
                let k = flatten_index(i, j, h);
                let v = cd[(i * w + j) * (h * w) + k];
                assert!((v - 1.0).abs() < 1e-12, "self-similarity {v} at ({i},{j})");
            }
        }
    }

    #[test]
    fn correlation_channel_order_follows_column_major_flattening() {
        // f_A = [[1,2],[3,4]] (single channel), f_B all ones: every channel
        // vector must read (1,3,2,4) under k = col*h + row.
        let f_a = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f_b = Tensor::ones(&[2, 2, 1]);
        let mut tape = Tape::new();
        let a = tape.constant(f_a);
        let b = tape.constant(f_b);
        let c = correlate(&mut tape, a, b).unwrap();
        let cd = tape.value(c).data();
        for loc in 0..4 {
            assert_eq!(&cd[loc * 4..(loc + 1) * 4], &[1.0, 3.0, 2.0, 4.0]);
        }
    }

    #[test]
    fn correlation_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w, d) = (4, 5, 8);
        let f_a = Tensor::rand_uniform(&[h, w, d], -1.0, 1.0, &mut rng);
        let f_b = Tensor::rand_uniform(&[h, w, d], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let a = tape.constant(f_a.clone());
        let b = tape.constant(f_b.clone());
        let c = correlate(&mut tape, a, b).unwrap();
        let cd = tape.value(c).data();
        // Naive five-loop oracle straight from the definition.
        for i in 0..h {
            for j in 0..w {
                for k in 0..h * w {
                    let (rk, ck) = (k % h, k / h);
                    let mut acc = 0.0;
                    for t in 0..d {
                        acc += f_b.data()[(i * w + j) * d + t] * f_a.data()[(rk * w + ck) * d + t];
                    }
                    let got = cd[(i * w + j) * (h * w) + k];
                    assert!((acc - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn correlate_is_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f_a = Tensor::rand_uniform(&[3, 3, 4], -1.0, 1.0, &mut rng);
        let f_b = Tensor::rand_uniform(&[3, 3, 4], -1.0, 1.0, &mut rng);
        let alpha = 2.5;
        let mut tape = Tape::new();
        let a = tape.constant(f_a.clone());
        let a_scaled = tape.constant(f_a.map(|v| alpha * v));
        let b = tape.constant(f_b);
        let c1 = correlate(&mut tape, a, b).unwrap();
        let c2 = correlate(&mut tape, a_scaled, b).unwrap();
        let scaled = tape.value(c1).map(|v| alpha * v);
        assert!(scaled.max_abs_diff(tape.value(c2)) < 1e-12);
    }

    #[test]
    fn normalization_amplifies_single_match() {
        let mut v = vec![0.0; 8];
        v[2] = 3.0;
        v[0] = -1.0;
        let c = Tensor::from_vec(&[1, 1, 8], v).unwrap();
        let mut tape = Tape::new();
        let cv = tape.constant(c);
        let n = normalize_correspondences(&mut tape, cv, CORRELATION_EPSILON).unwrap();
        let nd = tape.value(n).data();
        assert!((nd[2] - 1.0).abs() < 1e-12);
        assert!(nd.iter().enumerate().all(|(i, &x)| i == 2 || x == 0.0));
    }

    #[test]
    fn normalization_maps_all_negative_to_zero() {
        let c = Tensor::full(&[1, 1, 6], -0.5);
        let mut tape = Tape::new();
        let cv = tape.constant(c);
        let n = normalize_correspondences(&mut tape, cv, CORRELATION_EPSILON).unwrap();
        assert!(tape.value(n).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ambiguous_matches_are_downweighted() {
        // Two equal positives among noise score below the single-match 1.0.
        let mut v = vec![0.0; 8];
        v[1] = 2.0;
        v[5] = 2.0;
        v[3] = 0.1;
        let norm = (2.0f64 * 4.0 + 0.01).sqrt();
        let c = Tensor::from_vec(&[1, 1, 8], v).unwrap();
        let mut tape = Tape::new();
        let cv = tape.constant(c);
        let n = normalize_correspondences(&mut tape, cv, CORRELATION_EPSILON).unwrap();
        let nd = tape.value(n).data();
        assert!((nd[1] - 2.0 / norm).abs() < 1e-12);
        assert!(nd[1] < 1.0 && nd[5] < 1.0);
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = Tensor::rand_uniform(&[2, 2, 10], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let cv = tape.constant(c);
        let n1 = normalize_correspondences(&mut tape, cv, CORRELATION_EPSILON).unwrap();
        let n2 = normalize_correspondences(&mut tape, n1, CORRELATION_EPSILON).unwrap();
        assert!(tape.value(n1).max_abs_diff(tape.value(n2)) < 1e-12);
    }

    #[test]
    fn normalized_channel_vectors_are_unit_or_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let c = Tensor::rand_uniform(&[3, 3, 9], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let cv = tape.constant(c);
        let n = normalize_correspondences(&mut tape, cv, CORRELATION_EPSILON).unwrap();
        let nd = tape.value(n).data();
        for loc in 0..9 {
            let v = &nd[loc * 9..(loc + 1) * 9];
            assert!(v.iter().all(|&x| x >= 0.0));
            let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(nrm < 1e-12 || (nrm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn subtract_of_identical_maps_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let f = Tensor::rand_uniform(&[4, 4, 8], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let a = tape.constant(f.clone());
        let b = tape.constant(f);
        let s = match_subtract(&mut tape, a, b).unwrap();
        assert!(tape.value(s).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn concat_shape_and_reference_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let f_a = Tensor::rand_uniform(&[4, 4, 8], -1.0, 1.0, &mut rng);
        let f_b = Tensor::rand_uniform(&[4, 4, 8], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let a = tape.constant(f_a.clone());
        let b = tape.constant(f_b.clone());
        let cat = match_concat(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(cat).shape(), &[4, 4, 16]);
        let cd = tape.value(cat).data();
        for loc in 0..16 {
            for t in 0..8 {
                assert_eq!(cd[loc * 16 + t], f_b.data()[loc * 8 + t]);
                assert_eq!(cd[loc * 16 + 8 + t], f_a.data()[loc * 8 + t]);
            }
        }
        let sub = match_subtract(&mut tape, a, b).unwrap();
        let sd = tape.value(sub).data();
        for i in 0..sd.len() {
            assert!((sd[i] - (f_b.data()[i] - f_a.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[4, 4, 8]));
        let b = tape.constant(Tensor::zeros(&[4, 4, 4]));
        assert!(correlate(&mut tape, a, b).is_err());
        assert!(match_concat(&mut tape, a, b).is_err());
        assert!(match_subtract(&mut tape, a, b).is_err());
    }

    #[test]
    fn correlation_argmax_pattern_is_content_invariant() {
        // Two image pairs related by the same spatial permutation, encoded
        // with two different injective one-hot channel assignments. The
        // correlation argmax pattern must agree; concat/subtract outputs
        // must differ.
        let (h, w) = (2, 3);
        let d = h * w;
        let perm: Vec<usize> = vec![3, 0, 4, 1, 5, 2]; // location permutation
        let build = |assign: &dyn Fn(usize) -> usize| {
            let mut a = Tensor::zeros(&[h, w, d]);
            let mut b = Tensor::zeros(&[h, w, d]);
            for loc in 0..h * w {
                a.data_mut()[loc * d + assign(loc)] = 1.0;
                b.data_mut()[loc * d + assign(perm[loc])] = 1.0;
            }
            (a, b)
        };
        let (a1, b1) = build(&|l| l);
        let (a2, b2) = build(&|l| (l + 2) % d);

        let argmax_pattern = |fa: &Tensor, fb: &Tensor| {
            let mut tape = Tape::new();
            let a = tape.constant(fa.clone());
            let b = tape.constant(fb.clone());
            let c = correlate(&mut tape, a, b).unwrap();
            let cd = tape.value(c).data().to_vec();
            (0..h * w)
                .map(|loc| {
                    let row = &cd[loc * h * w..(loc + 1) * h * w];
                    row.iter()
                        .enumerate()
                        .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                        .unwrap()
                        .0
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(argmax_pattern(&a1, &b1), argmax_pattern(&a2, &b2));

        let mut tape = Tape::new();
        let (a1v, b1v) = (tape.constant(a1), tape.constant(b1));
        let (a2v, b2v) = (tape.constant(a2), tape.constant(b2));
        let cat1 = match_concat(&mut tape, a1v, b1v).unwrap();
        let cat2 = match_concat(&mut tape, a2v, b2v).unwrap();
        assert!(tape.value(cat1).max_abs_diff(tape.value(cat2)) > 0.5);
        let sub1 = match_subtract(&mut tape, a1v, b1v).unwrap();
        let sub2 = match_subtract(&mut tape, a2v, b2v).unwrap();
        assert!(tape.value(sub1).max_abs_diff(tape.value(sub2)) > 0.5);
    }
}
