"""Oracles for the gradient-level claims behind dynamic fine-tuning.

Three facts get verified numerically rather than symbolically:

1. The cross-entropy gradient on a demonstration equals the on-policy
   expectation of indicator-reward policy gradients carrying a 1/pi(y|x)
   importance weight. ``exact_policy_expectation`` computes that
   expectation by brute force over every sequence of a fixed length and
   must land exactly on the autodiff cross-entropy gradient.
2. The score function has zero mean under the policy
   (``exact_score_function_mean``).
3. The implicit 1/pi weight blows up the estimator variance by 1/p^2
   for single-token responses (``variance_probe``), which is the paper's
   instability argument in its smallest closed form.

Enumeration accumulates terms sequentially in lexicographic sequence
order; flat gradients use the model's canonical parameter order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backward, mul
from .model import Model
from .seeding import derive_seed


@dataclass
class EnumerationBudget:
    """Bounds for exact enumeration over all length-T sequences."""

    vocab_size: int
    horizon: int
    max_sequences: int = 10000

    def __post_init__(self):
        if self.vocab_size < 2 or self.horizon < 1:
            raise ValueError("need vocab_size >= 2 and horizon >= 1")
        if self.vocab_size**self.horizon > self.max_sequences:
            raise ValueError(
                f"{self.vocab_size}^{self.horizon} sequences exceed the "
                f"budget cap of {self.max_sequences}"
            )


@dataclass
class EstimatorSample:
    """One term of the reweighted expectation: y, pi(y|x), r, and its
    weighted gradient contribution."""

    sequence: tuple
    probability: float
    reward: float
    weighted_grad: np.ndarray


def grad_log_prob(model: Model, prompt, sequence) -> tuple:
    """(log pi(y|x), flat gradient of log pi(y|x)) for one sequence."""
    model.zero_grad()
    logp = model.token_log_probs(prompt, list(sequence)).sum()
    backward(logp)
    g = model.flat_grad()
    model.zero_grad()
    return float(logp.data), g


def iter_estimator_samples(model: Model, prompt, y_star, budget: EnumerationBudget):
    """Yield the full V^T grid of reweighted policy-gradient terms.

    Every sequence is visited and differentiated; the indicator reward is
    applied afterwards, so the collapse of the sum is an outcome, not a
    shortcut taken here.
    """
    target = tuple(y_star)
    if len(target) != budget.horizon:
        raise ValueError(
            f"y_star length {len(target)} must equal horizon {budget.horizon}"
        )
    for y in itertools.product(range(budget.vocab_size), repeat=budget.horizon):
        log_p, g = grad_log_prob(model, prompt, y)
        p = math.exp(log_p)
        r = 1.0 if y == target else 0.0
        w = r / p
        yield EstimatorSample(
            sequence=y, probability=p, reward=r, weighted_grad=p * w * g
        )


def exact_policy_expectation(model: Model, prompt, y_star,
                             budget: EnumerationBudget) -> np.ndarray:
    """Sum of pi(y) * [1[y=y*]/pi(y)] * grad log pi(y) over all y in V^T.

    Analytically this collapses to grad log pi(y*|x); the sum is computed
    in full so the collapse can be checked, not assumed.
    """
    total = np.zeros(model.num_params())
    for sample in iter_estimator_samples(model, prompt, y_star, budget):
        total += sample.weighted_grad
    return total


def exact_score_function_mean(model: Model, prompt,
                              budget: EnumerationBudget) -> np.ndarray:
    """E_y[grad log pi(y|x)] by enumeration; zero for any policy."""
    total = np.zeros(model.num_params())
    for y in itertools.product(range(budget.vocab_size), repeat=budget.horizon):
        log_p, g = grad_log_prob(model, prompt, y)
        total += math.exp(log_p) * g
    return total


def _sample_fixed_length(model: Model, prompt, horizon: int, n: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Draw n length-`horizon` sequences from the policy (no EOS handling)."""
    net = model.detached()
    cur = np.tile(np.asarray(prompt, dtype=np.int64), (n, 1))
    for _ in range(horizon):
        logits = net.forward(cur).data[:, -1, :]
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        cdf = np.cumsum(e / e.sum(axis=-1, keepdims=True), axis=-1)
        u = rng.random(n)
        tokens = np.minimum(
            (u[:, None] > cdf).sum(axis=1), model.config.vocab_size - 1
        )
        cur = np.concatenate([cur, tokens[:, None]], axis=1)
    return cur[:, len(prompt):]


def policy_gradient_estimate(model: Model, prompt, reward_fn, horizon: int,
                             n_samples: int, seed: int) -> np.ndarray:
    """Monte-Carlo mean of grad log pi(y|x) * r(x, y) over sampled y.

    ``reward_fn(sequence, probability)`` must depend only on its
    arguments; identical draws are grouped so each distinct sequence is
    differentiated once, which leaves the estimate unchanged.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    draws = _sample_fixed_length(model, prompt, horizon, n_samples, rng)
    counts: dict = {}
    for row in draws:
        key = tuple(int(t) for t in row)
        counts[key] = counts.get(key, 0) + 1
    total = np.zeros(model.num_params())
    for y, count in sorted(counts.items()):
        log_p, g = grad_log_prob(model, prompt, y)
        r = float(reward_fn(y, math.exp(log_p)))
        if r != 0.0:
            total += (count / n_samples) * r * g
    return total


def variance_probe(model: Model, prompt, y_star: int, n_samples: int,
                   seed: int) -> dict:
    """Compare the implicit-weight estimator against the indicator one.

    Single-token responses only. Estimator A draws y ~ pi and returns
    (1[y=y*]/pi(y)) * grad log pi(y); estimator B returns
    1[y=y*] * grad log pi(y). Both zero out on non-matching draws, so
    their per-coordinate variances factor into var(indicator) times the
    squared gradient at y*, scaled by 1/p*^2 for A. The two estimators
    use independent draw streams; sharing draws would make the empirical
    ratio collapse to the closed form and test nothing.
    """
    y_star = int(y_star)
    net = model.detached()
    logits = net.forward(np.asarray(prompt, dtype=np.int64)[None, :]).data[0, -1]
    z = logits - logits.max()
    e = np.exp(z)
    probs = e / e.sum()
    p_star = float(probs[y_star])
    _, g = grad_log_prob(model, prompt, [y_star])
    g_sq_mean = float(np.mean(g * g))

    def indicator_variance(stream_name):
        rng = np.random.default_rng(derive_seed(seed, "variance-probe", stream_name))
        u = rng.random(n_samples)
        draws = np.minimum((u[:, None] > np.cumsum(probs)).sum(axis=1), len(probs) - 1)
        ind = (draws == y_star).astype(np.float64)
        return float(ind.var())

    var_a = indicator_variance("implicit") / (p_star * p_star) * g_sq_mean
    var_b = indicator_variance("indicator") * g_sq_mean
    analytic = 1.0 / (p_star * p_star)
    return {
        "p_star": p_star,
        "n_samples": n_samples,
        "var_sft_implicit": var_a,
        "var_dft": var_b,
        "analytic_ratio": analytic,
        "empirical_ratio": (var_a / var_b) if var_b > 0 else None,
    }


def implicit_reward_scan(model: Model, dataset) -> dict:
    """Distribution of the implicit weight w = 1/p over response tokens.

    ``dataset`` holds Demonstration-like items (prompt_ids/response_ids).
    Tokens with w > 100 get counted as flagged; the probability floor of
    the log primitive caps w at 1e12.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    net = model.detached()
    weights = []
    for item in dataset:
        logp = net.token_log_probs(item.prompt_ids, item.response_ids).data
        p = np.maximum(np.exp(logp), 1e-12)
        weights.append(1.0 / p)
    w = np.concatenate(weights)
    return {
        "n_tokens": int(w.size),
        "quantiles": {
            "min": float(w.min()),
            "p50": float(np.quantile(w, 0.50)),
            "p90": float(np.quantile(w, 0.90)),
            "p99": float(np.quantile(w, 0.99)),
            "max": float(w.max()),
        },
        "n_flagged_above_100": int((w > 100.0).sum()),
    }


def sft_autodiff_grad(model: Model, prompt, response, reduction: str = "sum") -> np.ndarray:
    """Autodiff route for the cross-entropy gradient (identity check target)."""
    from .losses import sft_loss

    model.zero_grad()
    backward(sft_loss(model.token_log_probs(prompt, response), reduction=reduction))
    g = model.flat_grad()
    model.zero_grad()
    return g


def dft_token_reference_grad(model: Model, prompt, response,
                             reduction: str = "mean") -> np.ndarray:
    """Second route for the token-scaled gradient contract.

    Differentiates each token's -log p separately and scales that whole
    gradient by the token's probability, never touching stop-gradient.
    """
    logp = model.token_log_probs(prompt, response)
    probs = np.exp(logp.data)
    n = logp.data.shape[0]
    total = np.zeros(model.num_params())
    for t in range(n):
        picker = np.zeros(n)
        picker[t] = -1.0
        model.zero_grad()
        backward(mul(model.token_log_probs(prompt, response), Tensor(picker)).sum())
        total += probs[t] * model.flat_grad()
    model.zero_grad()
    return total / n if reduction == "mean" else total


# --- the oracle suite behind `dftlab verify` ---


def _tiny_model(vocab: int, seed: int) -> Model:
    from .model import ModelConfig

    return Model(ModelConfig(vocab_size=vocab, d_model=8, n_layers=1,
                             n_heads=2, context_length=12, seed=seed))


def _check_importance_identity(vocab_sizes, horizons, models_per_cell) -> dict:
    worst = 0.0
    for vocab in vocab_sizes:
        for horizon in horizons:
            for m in range(models_per_cell):
                model = _tiny_model(vocab, seed=derive_seed(m, "verify", vocab, horizon))
                rng = np.random.default_rng(derive_seed(m, "verify-data", vocab, horizon))
                prompt = [int(rng.integers(0, vocab))]
                y_star = [int(t) for t in rng.integers(0, vocab, size=horizon)]
                got = exact_policy_expectation(
                    model, prompt, y_star, EnumerationBudget(vocab, horizon)
                )
                sft = sft_autodiff_grad(model, prompt, y_star, reduction="sum")
                worst = max(worst, float(np.max(np.abs(got + sft))))
    return {
        "name": "importance-sampling-identity",
        "passed": worst <= 1e-10,
        "detail": f"max abs deviation {worst:.3e} over "
                  f"{list(vocab_sizes)}x{list(horizons)}, tol 1e-10",
    }


def _check_score_zero_mean(seed: int) -> dict:
    model = _tiny_model(3, seed=derive_seed(seed, "verify", "score"))
    mean = exact_score_function_mean(model, [1], EnumerationBudget(3, 3))
    worst = float(np.max(np.abs(mean)))
    return {
        "name": "score-function-zero-mean",
        "passed": worst <= 1e-10,
        "detail": f"V=3 T=3 max abs coordinate {worst:.3e}, tol 1e-10",
    }


def _check_gradient_identity(seed: int, trials: int = 20) -> dict:
    from .losses import dft_token_loss

    rng = np.random.default_rng(derive_seed(seed, "verify", "eq7"))
    worst = 0.0
    for trial in range(trials):
        model = _tiny_model(6, seed=derive_seed(seed, "verify", "eq7", trial))
        prompt = [int(t) for t in rng.integers(0, 6, size=2)]
        response = [int(t) for t in rng.integers(0, 6, size=3)]
        model.zero_grad()
        backward(dft_token_loss(model.token_log_probs(prompt, response)))
        got = model.flat_grad()
        ref = dft_token_reference_grad(model, prompt, response)
        scale = max(float(np.max(np.abs(ref))), 1e-12)
        worst = max(worst, float(np.max(np.abs(got - ref))) / scale)
    return {
        "name": "token-scaled-gradient-identity",
        "passed": worst <= 1e-10,
        "detail": f"max relative deviation {worst:.3e} over {trials} instances, tol 1e-10",
    }


def _check_variance_ratio(seed: int, n_samples: int) -> dict:
    worst = 0.0
    for p_star in (0.05, 0.1, 0.5):
        vocab = 6
        model = _tiny_model(vocab, seed=derive_seed(seed, "verify", "var"))
        net = model.detached()
        logits = net.forward(np.array([[0]])).data[0, -1]
        probs = np.full(vocab, (1.0 - p_star) / (vocab - 1))
        probs[3] = p_star
        model.params["head.b"].data[:] += np.log(probs) - logits
        report = variance_probe(model, [0], 3, n_samples=n_samples, seed=seed)
        ratio = report["empirical_ratio"] / report["analytic_ratio"]
        worst = max(worst, ratio, 1.0 / ratio)
    return {
        "name": "variance-blowup-ratio",
        "passed": worst <= 2.0,
        "detail": f"worst empirical/analytic factor {worst:.3f} at n={n_samples}, "
                  "tol x2",
    }


def run_verification(seed: int = 0, vocab_sizes=(2, 3), horizons=(1, 2, 3, 4),
                     models_per_cell: int = 5, n_samples: int = 100_000) -> list:
    """Run every oracle check; returns [{name, passed, detail}, ...]."""
    return [
        _check_importance_identity(vocab_sizes, horizons, models_per_cell),
        _check_score_zero_mean(seed),
        _check_gradient_identity(seed),
        _check_variance_ratio(seed, n_samples),
    ]
