"""Scout run for acceptance calibration (throwaway)."""
import json
import time

import numpy as np

from dftlab.evalreport import evaluate, token_histogram
from dftlab.losses import LossSpec
from dftlab.model import ModelConfig
from dftlab.tasks import default_task_spec, generate_dataset
from dftlab.training import RunConfig, train_run

spec = default_task_spec("addition-scratchpad", seed=0)
train, eval_in, eval_ood = generate_dataset(spec, 512, 128, 128)

def bin_counts(model, data):
    hist = token_histogram(model, data)
    return hist.counts[0], hist.counts[-1], hist.total

results = []
for tag, d, steps, lr in (("A", 32, 640, 3e-3), ("B", 48, 640, 3e-3), ("C", 32, 960, 3e-3)):
    row = {"tag": tag, "d": d, "steps": steps, "lr": lr}
    for kind in ("sft", "dft_token"):
        t0 = time.time()
        mc = ModelConfig(vocab_size=17, d_model=d, n_layers=2, n_heads=2,
                         context_length=64, seed=100)
        cfg = RunConfig(model=mc, loss=LossSpec(kind=kind), learning_rate=lr,
                        batch_size=32, epochs=None, max_steps=steps,
                        warmup_ratio=0.1, seed=100)
        model, metrics = train_run(cfg, train)
        t_train = time.time() - t0
        t0 = time.time()
        acc_in = evaluate(model, eval_in, k=4, temperature=1.0, seed=0).avg_at_k
        acc_ood = evaluate(model, eval_ood, k=4, temperature=1.0, seed=0, split="ood").avg_at_k
        t_eval = time.time() - t0
        low, high, total = bin_counts(model, train)
        row[kind] = {
            "loss": round(metrics[-1].loss, 4),
            "mean_p": round(metrics[-1].mean_p, 4),
            "acc_in": acc_in, "acc_ood": acc_ood,
            "low_bin": low, "high_bin": high, "total": total,
            "t_train": round(t_train, 1), "t_eval": round(t_eval, 1),
        }
        print(json.dumps({**{k: row[k] for k in ("tag", "d", "steps")}, "kind": kind, **row[kind]}), flush=True)
    results.append(row)

with open("scout_results.json", "w") as f:
    json.dump(results, f, indent=1)
