//! Teacher-forcing loss and its backward pass for the generative models.

use crate::encoding::{encode_with, AttentionGrads, PawaBank, TokenId};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, softmax_masked, softmax_rows, Matrix};
use crate::model::GrModel;
use crate::relevance::{cross_entropy, decoder_states_cached, shift_right};

/// What the head input `h_i` is scored against.
pub(crate) enum Head<'a> {
    /// Rows of the shared embedding table.
    Table,
    /// `E[i, v] * s_i` with `s_i` the decoder state.
    Bank(&'a PawaBank),
    /// Frozen rows of a vector pool.
    Pool(&'a Matrix),
}

/// Candidate output ids at one position and the target's index among them.
pub(crate) struct Outputs {
    pub candidates: Vec<usize>,
    pub target: usize,
}

pub(crate) struct DecoderGrad {
    pub table: Matrix,
    pub encoder: AttentionGrads,
    pub decoder: AttentionGrads,
    pub w: Matrix,
    pub w_v: Matrix,
    pub bank: Option<Matrix>,
}

fn scatter_rows(table: &mut Matrix, ids: &[TokenId], grads: &Matrix) {
    for (k, &id) in ids.iter().enumerate() {
        axpy(table.row_mut(id), 1.0, grads.row(k));
    }
}

/// Summed cross-entropy over identifier positions and its gradient.
/// `use_wv` false scores the raw context `Q alpha_i` (nonparametric head).
pub(crate) fn decoder_item(
    gr: &GrModel,
    head: &Head<'_>,
    use_wv: bool,
    query: &[TokenId],
    ident: &[TokenId],
    outputs: &[Outputs],
) -> Result<(f64, DecoderGrad)> {
    if outputs.len() != ident.len() {
        return Err(Error::invalid("one output set per identifier position required"));
    }
    let p = &gr.params;
    let dim = p.dim();
    let (qseq, qcache) = encode_with(query, &p.table, &gr.encoder, false)?;
    let q = qseq.vectors.rows();
    let (states, dcache) = decoder_states_cached(ident, p)?;
    let s = states.rows();
    let g = s.matmul_nt(&p.w)?;
    let a = softmax_rows(&g.matmul_nt(q)?);
    let c = a.matmul(q)?;
    let h = if use_wv { c.matmul_nt(&p.w_v)? } else { c.clone() };

    let m = ident.len();
    let n = q.rows();
    let mut d_table = Matrix::zeros(p.table.vocab_size(), dim);
    let mut d_bank = match head {
        Head::Bank(b) => Some(b.zeros_like()),
        _ => None,
    };
    let mut dh = Matrix::zeros(m, dim);
    let mut ds = Matrix::zeros(m, dim);
    let mut loss = 0.0;
    for (i, out) in outputs.iter().enumerate() {
        let hi = h.row(i);
        let vectors = out
            .candidates
            .iter()
            .map(|&k| match head {
                Head::Table => p.table.vector(k).map(<[f64]>::to_vec),
                Head::Bank(b) => b.project(i, k, s.row(i)),
                Head::Pool(pool) => {
                    if k >= pool.rows() {
                        Err(Error::invalid(format!("pool row {k} out of range")))
                    } else {
                        Ok(pool.row(k).to_vec())
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let z: Vec<f64> = vectors.iter().map(|o| dot(o, hi)).collect();
        loss += cross_entropy(&z, out.target)?;
        let mut dz = softmax_masked(&z, None);
        dz[out.target] -= 1.0;
        for ((&k, o), &g) in out.candidates.iter().zip(&vectors).zip(&dz) {
            axpy(dh.row_mut(i), g, o);
            match head {
                Head::Table => axpy(d_table.row_mut(k), g, hi),
                Head::Bank(b) => {
                    if let Some(db) = d_bank.as_mut() {
                        db.accumulate_outer(i, k, g, hi, s.row(i))?;
                    }
                    axpy(ds.row_mut(i), g, &b.project_transposed(i, k, hi)?);
                }
                Head::Pool(_) => {}
            }
        }
    }

    let (dc, d_wv) = if use_wv {
        (dh.matmul(&p.w_v)?, dh.matmul_tn(&c)?)
    } else {
        (dh, Matrix::zeros(dim, dim))
    };
    let da = dc.matmul_nt(q)?;
    let mut dq = a.matmul_tn(&dc)?;
    let mut dlogits = Matrix::zeros(m, n);
    for i in 0..m {
        let inner = dot(a.row(i), da.row(i));
        for j in 0..n {
            dlogits.set(i, j, a.get(i, j) * (da.get(i, j) - inner));
        }
    }
    let dg = dlogits.matmul(q)?;
    dq.add_scaled(1.0, &dlogits.matmul_tn(&g)?)?;
    ds.add_scaled(1.0, &dg.matmul(&p.w)?)?;
    let d_w = dg.matmul_tn(s)?;

    let decoder = p.decoder.backward(&dcache, &ds)?;
    scatter_rows(&mut d_table, &shift_right(ident), &decoder.input);
    let encoder = gr.encoder.backward(&qcache, &dq)?;
    scatter_rows(&mut d_table, query, &encoder.input);
    Ok((
        loss,
        DecoderGrad {
            table: d_table,
            encoder,
            decoder,
            w: d_w,
            w_v: d_wv,
            bank: d_bank.map(|b| b.weights().clone()),
        },
    ))
}
