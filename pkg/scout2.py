"""Warm-start scout for acceptance calibration (throwaway)."""
import json
import time

from dftlab.evalreport import evaluate, token_histogram
from dftlab.losses import LossSpec
from dftlab.model import ModelConfig
from dftlab.tasks import default_task_spec, generate_dataset
from dftlab.training import RunConfig, train_run

spec = default_task_spec("addition-scratchpad", seed=0)
train, eval_in, eval_ood = generate_dataset(spec, 512, 96, 96)

def cfg(kind, steps, seed, lr=3e-3, d=48):
    mc = ModelConfig(vocab_size=17, d_model=d, n_layers=2, n_heads=2,
                     context_length=64, seed=seed)
    return RunConfig(model=mc, loss=LossSpec(kind=kind), learning_rate=lr,
                     batch_size=32, epochs=None, max_steps=steps,
                     warmup_ratio=0.1, seed=seed)

for seed in (100,):
    for warm_steps, arm_steps in ((300, 400),):
        t0 = time.time()
        warm, _ = train_run(cfg("sft", warm_steps, seed), train)
        warm_in = evaluate(warm, eval_in, k=2, temperature=1.0, seed=0).avg_at_k
        print(json.dumps({"stage": "warm", "steps": warm_steps, "acc_in": warm_in,
                          "t": round(time.time()-t0, 1)}), flush=True)
        for kind in ("sft", "dft_token"):
            t0 = time.time()
            model, metrics = train_run(cfg(kind, arm_steps, seed), train,
                                       initial_model=warm)
            acc_in = evaluate(model, eval_in, k=4, temperature=1.0, seed=0).avg_at_k
            acc_ood = evaluate(model, eval_ood, k=4, temperature=1.0, seed=0,
                               split="ood").avg_at_k
            hist = token_histogram(model, train)
            print(json.dumps({
                "stage": kind, "seed": seed, "warm": warm_steps, "arm": arm_steps,
                "loss": round(metrics[-1].loss, 4),
                "mean_p": round(metrics[-1].mean_p, 4),
                "acc_in": acc_in, "acc_ood": acc_ood,
                "low_bin": hist.counts[0], "high_bin": hist.counts[-1],
                "total": hist.total, "t": round(time.time()-t0, 1),
            }), flush=True)
