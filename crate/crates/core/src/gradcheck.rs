//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn eval<F>(params: &ParamSet, f: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let mut tape = Tape::with_params(params);
    let loss = f(&mut tape)?;
    Ok(tape.scalar(loss))
}

/// Compares analytic gradients of `f` against central differences for every
/// entry of the parameters in `ids` (all trainable parameters when empty).
///
/// The error per entry is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
/// `f` must be deterministic; two disagreeing forward passes are rejected.
pub fn grad_check<F>(params: &mut ParamSet, ids: &[ParamId], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let ids: Vec<ParamId> =
        if ids.is_empty() { params.ids().filter(|&id| params.is_trainable(id)).collect() } else { ids.to_vec() };

    let analytic = {
        let mut tape = Tape::with_params(params);
        let loss = f(&mut tape)?;
        let first = tape.scalar(loss);
        let again = eval(params, &f)?;
        if first.to_bits() != again.to_bits() {
            return Err(Error::invalid(format!("grad_check: function is not deterministic ({first} vs {again})")));
        }
        let grads = tape.backward(loss)?;
        tape.param_grads(&grads)
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for id in ids {
        let n = params.get(id).len();
        let an: Vec<f64> = analytic.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for (i, &a) in an.iter().enumerate() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(params, &f);
            params.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(params, &f);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

/// Gradient checks of every layer and of the full document loss with both
/// memories under each integration, on small random inputs. Parameters are
/// redrawn uniformly in [-0.6, 0.6] so that no term (memory heads included)
/// is trivially zero.
pub fn suite(seed: u64, eps: f64) -> Result<Vec<(String, GradCheckReport)>> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::corpus::END;
    use crate::docnmt::{doc_nll, DocBatch, DocModel, DocModelConfig, MemorySelection};
    use crate::layers::{birnn, unroll, Affine, DropoutCtx, GruParams, LstmParams};
    use crate::memory::{lm_nll, mem_read, LmParams, Memory, Origin};
    use crate::nmt::{nll, Conditioning, Integration, MemoryContext, MemoryHeads, NmtDims, NmtParams};
    use crate::tensor::Tensor;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scramble = |ps: &mut ParamSet, rng: &mut ChaCha8Rng| {
        for id in ps.ids().collect::<Vec<_>>() {
            let t = Tensor::uniform(ps.get(id).shape(), 0.6, rng);
            *ps.get_mut(id) = t;
        }
    };
    let mut out = Vec::new();

    let mut ps = ParamSet::new();
    let gru = GruParams::init(&mut ps, "gru", 3, 4, &mut rng)?;
    let lstm = LstmParams::init(&mut ps, "lstm", 4, 3, &mut rng)?;
    let aff = Affine::init(&mut ps, "affine", 3, 2, &mut rng)?;
    let bwd = GruParams::init(&mut ps, "bwd", 3, 4, &mut rng)?;
    let emb = ps.insert("emb", Tensor::uniform(&[5, 3], 1.0, &mut rng))?;
    scramble(&mut ps, &mut rng);
    let seq_of = |tape: &mut Tape<'_>| -> Result<Vec<Var>> {
        let table = tape.param(emb);
        [1, 4, 2].iter().map(|&i| tape.lookup(table, i)).collect()
    };
    let square_sum = |tape: &mut Tape<'_>, v: Var| -> Result<Var> {
        let sq = tape.mul(v, v)?;
        tape.sum(sq)
    };
    out.push((
        "gru".to_string(),
        grad_check(&mut ps, &[], eps, |tape| {
            let seq = seq_of(tape)?;
            let hs = unroll(tape, &seq, &gru)?;
            square_sum(tape, hs[2])
        })?,
    ));
    out.push((
        "lstm".to_string(),
        grad_check(&mut ps, &[], eps, |tape| {
            let seq = seq_of(tape)?;
            let hs = unroll(tape, &seq, &gru)?;
            let ls = unroll(tape, &hs, &lstm)?;
            square_sum(tape, ls[2].h)
        })?,
    ));
    out.push((
        "birnn".to_string(),
        grad_check(&mut ps, &[], eps, |tape| {
            let seq = seq_of(tape)?;
            let states = birnn(tape, &seq, &gru, &bwd)?;
            let s = states.summary(tape)?;
            square_sum(tape, s)
        })?,
    ));
    out.push((
        "affine+embedding".to_string(),
        grad_check(&mut ps, &[], eps, |tape| {
            let seq = seq_of(tape)?;
            let y = aff.apply(tape, seq[1])?;
            let t = tape.tanh(y)?;
            square_sum(tape, t)
        })?,
    ));

    let mut ps = ParamSet::new();
    let cells = ps.insert("cells", Tensor::uniform(&[4, 3], 1.0, &mut rng))?;
    let q = ps.insert("query", Tensor::uniform(&[3], 1.0, &mut rng))?;
    out.push((
        "memory read".to_string(),
        grad_check(&mut ps, &[], eps, |tape| {
            let table = tape.param(cells);
            let rows: Vec<Var> = (0..4).map(|i| tape.lookup(table, i)).collect::<Result<_>>()?;
            let m = Memory::from_cells(tape, &rows, Origin::Source)?;
            let qv = tape.param(q);
            let (p, o) = mem_read(tape, &m, qv, Some(2))?;
            let w = tape.constant_vec(vec![0.3, -0.7, 0.2, 0.9])?;
            let pw = tape.mul(p, w)?;
            let a = tape.sum(pw)?;
            let b = square_sum(tape, o)?;
            tape.add(a, b)
        })?,
    ));

    let mut ps = ParamSet::new();
    let lm = LmParams::init(&mut ps, "lm.", 8, 3, 3, &mut rng)?;
    scramble(&mut ps, &mut rng);
    out.push(("sentence lm".to_string(), grad_check(&mut ps, &[], eps, |tape| Ok(lm_nll(tape, &lm, &[3, 7, 4])?.0))?));

    let dims = NmtDims { src_vocab: 9, tgt_vocab: 8, embed: 4, hidden: 4, align: 3, decoder_layers: 1 };
    let mut ps = ParamSet::new();
    let p = NmtParams::init(&mut ps, &dims, &mut rng)?;
    let heads = MemoryHeads::init(&mut ps, &dims, 5, 4)?;
    scramble(&mut ps, &mut rng);
    out.push((
        "sentence nmt".to_string(),
        grad_check(&mut ps, &[], eps, |tape| {
            nll(tape, &p, &[3, 5, 2], &[4, 3, END], &Conditioning::none(), &mut DropoutCtx::eval())
        })?,
    ));
    for integration in [Integration::MemToContext, Integration::MemToOutput] {
        let name = format!("decoder with memory contexts ({integration:?})");
        out.push((
            name,
            grad_check(&mut ps, &[], eps, |tape| {
                let src = tape.constant_vec(vec![0.3, -0.2, 0.5, 0.1, -0.4])?;
                let trg = tape.constant_vec(vec![0.2, 0.1, -0.3, 0.4])?;
                let cond = Conditioning {
                    heads: Some(&heads),
                    integration,
                    ctx: MemoryContext { src: Some(src), trg: Some(trg), prev: None },
                };
                nll(tape, &p, &[3, 5, 2], &[4, 3, END], &cond, &mut DropoutCtx::eval())
            })?,
        ));
    }

    for integration in [Integration::MemToContext, Integration::MemToOutput] {
        let mut cfg = DocModelConfig::sentence_level(9, 8, 4);
        cfg.memories = MemorySelection::Both;
        cfg.integration = integration;
        cfg.lm_hidden = 3;
        cfg.doc_hidden = 3;
        let mut m = DocModel::new(cfg, seed)?;
        scramble(&mut m.params, &mut rng);
        m.params.freeze_prefix(crate::docnmt::LM_PREFIX);
        let src = vec![vec![3, 4], vec![5, 6, 7]];
        let tgt = vec![vec![3, END], vec![4, 5, END]];
        let gen = vec![vec![4], vec![5, 5]];
        let model = m.clone();
        let name = format!("document loss, both memories ({integration:?})");
        out.push((
            name,
            grad_check(&mut m.params, &[], eps, |tape| {
                let b = DocBatch { src: &src, tgt: &tgt, mem_trg: &gen, lm_reps: None };
                Ok(doc_nll(tape, &model, &b, &mut DropoutCtx::eval())?.loss)
            })?,
        ));
    }
    Ok(out)
}
