"""Central finite-difference oracle shared by the model and acceptance tests."""

import numpy as np

from posbias.bias_stats import BiasTerm
from posbias.ensemble import TrainConfig
from posbias.model import Encoded, example_loss_and_grads, init_params

STEP = 1e-6


def random_instance(seed, n=6, n_question=3, d=4, vocab_size=12, max_seq_len=10):
    rng = np.random.default_rng(seed)
    params = init_params(vocab_size, d, max_seq_len, int(rng.integers(2**31)))
    # move every group away from its initial scale so no term is negligible
    for _, value in params.items():
        value += rng.normal(0.0, 0.5, size=value.shape)
    start = int(rng.integers(n))
    enc = Encoded(
        passage=rng.integers(0, vocab_size, size=n),
        question=rng.integers(0, vocab_size, size=n_question),
        start=start,
        end=int(rng.integers(start, n)),
    )
    bias = BiasTerm(rng.random(n), rng.random(n))
    return params, enc, bias


def relative_errors(params, enc, config: TrainConfig, bias=None, positions=None):
    """Per parameter group: ||analytic - numeric|| / max(||analytic||, ||numeric||).

    Groups whose gradients are both below 1e-9 in norm report 0.
    """
    use_bias = bias if config.needs_prior else None
    _, grads, _ = example_loss_and_grads(params, enc, config, use_bias, positions)
    errors = {}
    for name, value in params.items():
        numeric = np.zeros_like(value)
        it = np.nditer(value, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = value[i]
            value[i] = old + STEP
            up = example_loss_and_grads(params, enc, config, use_bias, positions)[0]
            value[i] = old - STEP
            down = example_loss_and_grads(params, enc, config, use_bias, positions)[0]
            value[i] = old
            numeric[i] = (up - down) / (2 * STEP)
        analytic = getattr(grads, name)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        errors[name] = 0.0 if scale < 1e-9 else float(np.linalg.norm(analytic - numeric) / scale)
    return errors
