//! In-batch contrastive loss for the multi-vector model and its backward pass.

use crate::alignment::Direction;
use crate::encoding::{encode_with, AttentionCache, TokenId, TokenMatrix};
use crate::error::{Error, Result};
use crate::exec::{tree_reduce, Execution};
use crate::linalg::{axpy, Matrix};
use crate::model::{top1, MvdrModel};
use crate::relevance::{contrastive_grad, loss_contrastive, rel_unified};

use super::Gradients;

struct Encoded {
    ids: Vec<TokenId>,
    vectors: TokenMatrix,
    cache: AttentionCache,
}

fn encode(model: &MvdrModel, ids: &[TokenId]) -> Result<Encoded> {
    let (seq, cache) = encode_with(ids, &model.table, &model.encoder, false)?;
    Ok(Encoded { ids: seq.ids, vectors: seq.vectors, cache })
}

/// `queries[a]` is relevant to `docs[a]`; every other document in the batch
/// is a negative. Ids must already be cleaned of padding. Returns the mean
/// loss over queries and its gradient.
pub(crate) fn mvdr_batch(
    model: &MvdrModel,
    queries: &[Vec<TokenId>],
    docs: &[Vec<TokenId>],
    direction: Direction,
    exec: Execution,
) -> Result<(f64, Gradients)> {
    let b = queries.len();
    if b == 0 || docs.len() != b {
        return Err(Error::Empty("contrastive batch"));
    }
    let qs = exec.try_map(queries, |ids| encode(model, ids))?;
    let ds = exec.try_map(docs, |ids| encode(model, ids))?;
    let pairs = exec
        .map_range(b * b, |k| {
            let (qa, db) = (&qs[k / b], &ds[k % b]);
            let a = top1(&db.vectors, &qa.vectors, direction)?;
            let score = rel_unified(&db.vectors, &qa.vectors, &a)?.value;
            Ok((score, a.matrix))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let scores = Matrix::from_fn(b, b, |x, y| pairs[x * b + y].0)?;
    let mut loss = 0.0;
    let mut dscore = Matrix::zeros(b, b);
    for x in 0..b {
        loss += loss_contrastive(scores.row(x), x)?;
        let g = contrastive_grad(scores.row(x), x);
        for (y, gv) in g.into_iter().enumerate() {
            dscore.set(x, y, gv / b as f64);
        }
    }
    loss /= b as f64;

    // d rel / d q_j = sum_i A_ij d_i ; d rel / d d_i = sum_j A_ij q_j
    let dq = exec.map_range(b, |x| -> Result<Matrix> {
        let mut out = Matrix::zeros(qs[x].vectors.len(), qs[x].vectors.dim());
        for y in 0..b {
            out.add_scaled(dscore.get(x, y), &pairs[x * b + y].1.matmul_tn(ds[y].vectors.rows())?)?;
        }
        Ok(out)
    });
    let dd = exec.map_range(b, |y| -> Result<Matrix> {
        let mut out = Matrix::zeros(ds[y].vectors.len(), ds[y].vectors.dim());
        for x in 0..b {
            out.add_scaled(dscore.get(x, y), &pairs[x * b + y].1.matmul(qs[x].vectors.rows())?)?;
        }
        Ok(out)
    });
    let seqs: Vec<(&Encoded, Result<Matrix>)> = qs.iter().zip(dq).chain(ds.iter().zip(dd)).collect();
    let grads = exec.try_map(&seqs, |(enc, grad)| -> Result<Gradients> {
        let grad = grad.as_ref().map_err(|e| Error::invalid(e.to_string()))?;
        let g = model.encoder.backward(&enc.cache, grad)?;
        let mut table = Matrix::zeros(model.table.vocab_size(), model.table.dim());
        for (k, &id) in enc.ids.iter().enumerate() {
            axpy(table.row_mut(id), 1.0, g.input.row(k));
        }
        Ok(Gradients(vec![table, g.w_query, g.w_key, g.w_value]))
    })?;
    let total = tree_reduce(grads, Gradients::sum).expect("non-empty batch");
    Ok((loss, total))
}
