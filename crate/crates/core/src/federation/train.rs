//! Local client training, uniform aggregation and mutual distillation.

use rand::seq::SliceRandom;

use super::DistillStep;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::{scaled_token_loss, server_losses_weighted, DistillWeights};
use crate::lora::LoraAdapterSet;
use crate::model::{sequence_nll, LanguageModel};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{sgd_step, Graph};

fn predicted_tokens(seqs: &[&[usize]]) -> usize {
    seqs.iter().map(|s| s.len().saturating_sub(1)).sum()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Token-weighted mean next-token loss over `batch` and its gradient with
/// respect to `adapters`, flattened. Sequences are processed independently
/// and their contributions summed in batch order.
pub fn batch_gradient(
    model: &LanguageModel,
    adapters: &LoraAdapterSet,
    batch: &[&[usize]],
    exec: Execution,
) -> Result<(f64, Vec<f64>)> {
    let total = predicted_tokens(batch);
    if total == 0 {
        return Err(Error::Input("batch has no predictable tokens".into()));
    }
    let parts = exec.map(batch, |seq| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let bound = adapters.bind(&mut g);
        let logits = model.forward(&mut g, seq, Some(&bound))?;
        let loss = scaled_token_loss(&mut g, logits, seq, 1.0 / total as f64)?;
        g.backward(loss)?;
        Ok((g.scalar(loss), bound.grads(&g)))
    });
    let mut loss = 0.0;
    let mut grad: Option<Vec<f64>> = None;
    for p in parts {
        let (l, gr) = p?;
        loss += l;
        match grad.as_mut() {
            Some(acc) => add_into(acc, &gr),
            None => grad = Some(gr),
        }
    }
    Ok((loss, grad.expect("batch is non-empty")))
}

/// Token-weighted mean next-token loss of `adapters` on `data`.
pub fn sequence_loss(
    model: &LanguageModel,
    adapters: &LoraAdapterSet,
    data: &[Vec<usize>],
    exec: Execution,
) -> Result<f64> {
    let parts = exec.map(data, |seq| sequence_nll(model, Some(adapters), seq));
    let (mut nll, mut n) = (0.0, 0);
    for p in parts {
        let (a, b) = p?;
        nll += a;
        n += b;
    }
    if n == 0 {
        return Err(Error::Input("no predictable tokens".into()));
    }
    Ok(nll / n as f64)
}

fn sgd(adapters: &mut LoraAdapterSet, grad: &[f64], lr: f64) -> Result<()> {
    adapters.set_grads_flat(grad)?;
    sgd_step(&mut adapters.params_mut(), lr)
}

/// A client's private shard and local training settings.
#[derive(Debug, Clone)]
pub struct ClientState<'a> {
    pub id: usize,
    pub data: &'a [Vec<usize>],
    pub slm: &'a LanguageModel,
    pub adapter: LoraAdapterSet,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct ClientResult {
    pub adapter: LoraAdapterSet,
    pub epoch_losses: Vec<f64>,
}

/// Replaces the client's adapter with `global` and runs `epochs` of
/// minibatch SGD over the local shard. Batch order is drawn from
/// `(seed, client id, round, epoch)`.
pub fn client_update(
    client: &ClientState<'_>,
    global: &LoraAdapterSet,
    round: usize,
    seed: u64,
    exec: Execution,
) -> Result<ClientResult> {
    if !global.same_layout(&client.adapter) {
        return Err(Error::Protocol(format!(
            "client {} received an adapter with a different layout",
            client.id
        )));
    }
    if client.epochs > 0 && client.data.is_empty() {
        return Err(Error::Protocol(format!("client {} has no local data", client.id)));
    }
    if client.batch_size == 0 {
        return Err(Error::Config("client batch size must be positive".into()));
    }
    let mut adapter = global.clone();
    adapter.clear_grads();
    let mut epoch_losses = Vec::with_capacity(client.epochs);
    for epoch in 0..client.epochs {
        let mut order: Vec<usize> = (0..client.data.len()).collect();
        let s = derive_seed(seed, "client.shuffle", &[client.id as u64, round as u64, epoch as u64]);
        order.shuffle(&mut rng_from(s));
        let (mut weighted, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(client.batch_size) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| client.data[i].as_slice()).collect();
            let n = predicted_tokens(&batch);
            let (loss, grad) = batch_gradient(client.slm, &adapter, &batch, exec)?;
            sgd(&mut adapter, &grad, client.lr)?;
            weighted += loss * n as f64;
            tokens += n;
        }
        epoch_losses.push(weighted / tokens as f64);
    }
    Ok(ClientResult { adapter, epoch_losses })
}

/// Uniform elementwise mean of the client adapters.
pub fn aggregate(updates: &[LoraAdapterSet]) -> Result<LoraAdapterSet> {
    let first = updates.first().ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    if let Some(i) = updates.iter().position(|u| !u.same_layout(first)) {
        return Err(Error::Protocol(format!("update {i} has a different adapter layout")));
    }
    let mut sum = first.flatten();
    for u in &updates[1..] {
        add_into(&mut sum, &u.flatten());
    }
    let k = updates.len() as f64;
    sum.iter_mut().for_each(|x| *x /= k);
    first.unflatten(&sum)
}

/// Endless minibatch source: reshuffles indices `0..n` every pass.
#[derive(Debug, Clone)]
pub struct BatchCursor {
    seed: u64,
    pass: u64,
    pos: usize,
    order: Vec<usize>,
}

impl BatchCursor {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut c = BatchCursor {
            seed,
            pass: 0,
            pos: 0,
            order: (0..n).collect(),
        };
        c.shuffle();
        c
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut rng_from(derive_seed(self.seed, "cursor", &[self.pass])));
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < size {
            if self.pos == self.order.len() {
                self.pass += 1;
                self.pos = 0;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Server side of the protocol.
#[derive(Debug, Clone)]
pub struct ServerState<'a> {
    pub slm: &'a LanguageModel,
    pub theta: LoraAdapterSet,
    pub llm: Option<&'a LanguageModel>,
    pub omega: Option<LoraAdapterSet>,
    pub aux: &'a [Vec<usize>],
    pub distill_steps: usize,
    pub lr_theta: f64,
    pub lr_omega: f64,
    pub weights: DistillWeights,
    pub batch_size: usize,
    pub cursor: BatchCursor,
}

/// `R` steps of mutual distillation on auxiliary batches. Both losses are
/// formed from the same pre-step logits; θ is then updated by `∇L_g` and
/// ω by `∇L_f`.
pub fn mutual_transfer(server: &mut ServerState<'_>, exec: Execution) -> Result<Vec<DistillStep>> {
    if server.distill_steps == 0 {
        return Ok(Vec::new());
    }
    let (Some(llm), Some(_)) = (server.llm, server.omega.as_ref()) else {
        return Err(Error::Config("distillation needs a server LLM and its adapter".into()));
    };
    if server.aux.is_empty() {
        return Err(Error::Protocol("auxiliary dataset is empty".into()));
    }
    let mut log = Vec::with_capacity(server.distill_steps);
    for step in 0..server.distill_steps {
        let idx = server.cursor.next_batch(server.batch_size);
        let batch: Vec<&[usize]> = idx.iter().map(|&i| server.aux[i].as_slice()).collect();
        let total = predicted_tokens(&batch);
        if total == 0 {
            return Err(Error::Protocol("auxiliary batch has no predictable tokens".into()));
        }
        let (slm, theta, omega, w) = (server.slm, &server.theta, server.omega.as_ref().unwrap(), server.weights);
        let parts = exec.map(&batch, |seq| -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
            let mut g = Graph::new();
            let bt = theta.bind(&mut g);
            let bo = omega.bind(&mut g);
            let lf = llm.forward(&mut g, seq, Some(&bo))?;
            let lg = slm.forward(&mut g, seq, Some(&bt))?;
            let weight = (seq.len() - 1) as f64 / total as f64;
            let l = server_losses_weighted(&mut g, lf, lg, seq, &w, weight)?;
            let sum = l.total(&mut g)?;
            g.backward(sum)?;
            Ok((g.scalar(l.l_f), g.scalar(l.l_g), bo.grads(&g), bt.grads(&g)))
        });
        let (mut l_f, mut l_g) = (0.0, 0.0);
        let (mut g_omega, mut g_theta): (Option<Vec<f64>>, Option<Vec<f64>>) = (None, None);
        for p in parts {
            let (a, b, go, gt) = p?;
            l_f += a;
            l_g += b;
            match (g_omega.as_mut(), g_theta.as_mut()) {
                (Some(x), Some(y)) => {
                    add_into(x, &go);
                    add_into(y, &gt);
                }
                _ => {
                    g_omega = Some(go);
                    g_theta = Some(gt);
                }
            }
        }
        sgd(&mut server.theta, &g_theta.expect("non-empty batch"), server.lr_theta)?;
        sgd(server.omega.as_mut().unwrap(), &g_omega.expect("non-empty batch"), server.lr_omega)?;
        log.push(DistillStep { step, l_f, l_g });
    }
    Ok(log)
}
