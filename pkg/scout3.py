"""Arm-length scout (throwaway)."""
import json
import time

from dftlab.evalreport import evaluate, token_histogram
from dftlab.losses import LossSpec
from dftlab.model import ModelConfig
from dftlab.tasks import default_task_spec, generate_dataset
from dftlab.training import RunConfig, train_run

spec = default_task_spec("addition-scratchpad", seed=0)
train, eval_in, eval_ood = generate_dataset(spec, 256, 96, 96)

def cfg(kind, steps, seed, lr=3e-3, d=32):
    mc = ModelConfig(vocab_size=17, d_model=d, n_layers=2, n_heads=2,
                     context_length=64, seed=seed)
    return RunConfig(model=mc, loss=LossSpec(kind=kind), learning_rate=lr,
                     batch_size=32, epochs=None, max_steps=steps,
                     warmup_ratio=0.1, seed=seed)

seed = 100
warm, _ = train_run(cfg("sft", 300, seed), train)
for arm in (500, 1000, 1500):
    for kind in ("sft", "dft_token"):
        t0 = time.time()
        model, metrics = train_run(cfg(kind, arm, seed), train, initial_model=warm)
        em_t1 = evaluate(model, eval_in, k=4, temperature=1.0, seed=0).avg_at_k
        em_greedy = evaluate(model, eval_in, k=1, temperature=1.0, seed=0,
                             greedy=True).avg_at_k
        ood_t1 = evaluate(model, eval_ood, k=4, temperature=1.0, seed=0,
                          split="ood").avg_at_k
        hist = token_histogram(model, train)
        mid = hist.total - hist.counts[0] - hist.counts[-1]
        print(json.dumps({
            "kind": kind, "arm": arm,
            "loss": round(metrics[-1].loss, 4), "mean_p": round(metrics[-1].mean_p, 4),
            "em_t1": round(em_t1, 4), "em_greedy": round(em_greedy, 4),
            "ood_t1": round(ood_t1, 4),
            "low": hist.counts[0], "mid": mid, "high": hist.counts[-1],
            "t": round(time.time() - t0, 1),
        }), flush=True)
