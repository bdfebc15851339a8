"""Short-arm scout (throwaway)."""
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

for seed in (100, 101, 102):
    warm, _ = train_run(cfg("sft", 600, seed), train)
    for arm in (150, 250):
        row = {"seed": seed, "warm": 600, "arm": arm}
        for kind in ("sft", "dft_token"):
            model, _ = train_run(cfg(kind, arm, seed), train, initial_model=warm)
            em = evaluate(model, eval_in, k=4, temperature=1.0, seed=0).avg_at_k
            hist = token_histogram(model, train)
            row[kind] = {
                "em": round(em, 4), "low": hist.counts[0],
                "mid": hist.total - hist.counts[0] - hist.counts[-1],
                "high": hist.counts[-1],
            }
        ok_low = row["dft_token"]["low"] > row["sft"]["low"]
        ok_high = row["dft_token"]["high"] >= row["sft"]["high"]
        row["ok"] = {"low": ok_low, "high": ok_high,
                     "em_gap": round(row["dft_token"]["em"] - row["sft"]["em"], 4)}
        print(json.dumps(row), flush=True)
