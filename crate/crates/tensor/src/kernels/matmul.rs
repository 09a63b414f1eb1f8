use crate::element::{gemm, Element, MatRef};
use crate::error::{Result, TensorError};
use crate::kernels::broadcast::broadcast_shape;
use crate::tensor::strides;

/// Shape bookkeeping for a batched, leading-dimension-broadcast matrix product.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub out_shape: Vec<usize>,
    /// Matrix index into `a` and `b` for every output batch entry.
    pub pairs: Vec<(usize, usize)>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(TensorError::dim("matmul", format!("operands must be at least rank 2, got {a:?} and {b:?}")));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(TensorError::dim("matmul", format!("inner dimensions differ: {a:?} x {b:?}")));
        }
        let ba = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch = broadcast_shape(ba, bb)?;
        let count: usize = batch.iter().product();
        let sa = lead_strides(ba, &batch);
        let sb = lead_strides(bb, &batch);
        let bs = strides(&batch);
        let pairs = (0..count)
            .map(|flat| {
                let mut ia = 0;
                let mut ib = 0;
                for d in 0..batch.len() {
                    let i = (flat / bs[d]) % batch[d];
                    ia += i * sa[d];
                    ib += i * sb[d];
                }
                (ia, ib)
            })
            .collect();
        let mut out_shape = batch;
        out_shape.extend([m, p]);
        Ok(MatmulPlan { m, k, p, out_shape, pairs })
    }
}

fn lead_strides(shape: &[usize], batch: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = batch.len() - shape.len();
    (0..batch.len()).map(|i| if i < lead || shape[i - lead] == 1 { 0 } else { own[i - lead] }).collect()
}

pub fn matmul_forward<T: Element>(plan: &MatmulPlan, a: &[T], b: &[T]) -> Vec<T> {
    let (m, k, p) = (plan.m, plan.k, plan.p);
    let mut out = vec![T::zero(); plan.pairs.len() * m * p];
    for (o, &(ia, ib)) in out.chunks_mut(m * p).zip(&plan.pairs) {
        gemm(
            T::one(),
            MatRef::new(&a[ia * m * k..(ia + 1) * m * k], m, k),
            MatRef::new(&b[ib * k * p..(ib + 1) * k * p], k, p),
            T::zero(),
            o,
        );
    }
    out
}

/// Gradients with respect to `a` and/or `b`; broadcast operands accumulate
/// over the batch entries that reused them, in batch order.
pub fn matmul_backward<T: Element>(
    plan: &MatmulPlan,
    a: &[T],
    b: &[T],
    g: &[T],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (m, k, p) = (plan.m, plan.k, plan.p);
    let mut ga = need_a.then(|| vec![T::zero(); a.len()]);
    let mut gb = need_b.then(|| vec![T::zero(); b.len()]);
    for (gi, &(ia, ib)) in g.chunks(m * p).zip(&plan.pairs) {
        let gmat = MatRef::new(gi, m, p);
        if let Some(ga) = ga.as_mut() {
            let bt = MatRef::transposed(&b[ib * k * p..(ib + 1) * k * p], k, p);
            gemm(T::one(), gmat, bt, T::one(), &mut ga[ia * m * k..(ia + 1) * m * k]);
        }
        if let Some(gb) = gb.as_mut() {
            let at = MatRef::transposed(&a[ia * m * k..(ia + 1) * m * k], m, k);
            gemm(T::one(), at, gmat, T::one(), &mut gb[ib * k * p..(ib + 1) * k * p]);
        }
    }
    (ga, gb)
}
