"""Long-warm scout (throwaway)."""
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

for seed in (100, 101):
    for warm_steps in (600, 900):
        warm, _ = train_run(cfg("sft", warm_steps, seed), train)
        whist = token_histogram(warm, train)
        print(json.dumps({"seed": seed, "warm": warm_steps,
                          "w_low": whist.counts[0],
                          "w_mid": whist.total - whist.counts[0] - whist.counts[-1],
                          "w_high": whist.counts[-1]}), flush=True)
        for arm in (400,):
            for kind in ("sft", "dft_token"):
                t0 = time.time()
                model, metrics = train_run(cfg(kind, arm, seed), train,
                                           initial_model=warm)
                em = evaluate(model, eval_in, k=4, temperature=1.0, seed=0).avg_at_k
                hist = token_histogram(model, train)
                print(json.dumps({
                    "seed": seed, "warm": warm_steps, "arm": arm, "kind": kind,
                    "em_t1": round(em, 4),
                    "low": hist.counts[0],
                    "mid": hist.total - hist.counts[0] - hist.counts[-1],
                    "high": hist.counts[-1],
                    "t": round(time.time() - t0, 1),
                }), flush=True)
