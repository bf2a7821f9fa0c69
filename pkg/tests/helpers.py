"""Small model fixtures shared across test modules."""

import math

import numpy as np
import torch

from cntpp.events import EventSequence, engagement, generation
from cntpp.model import CntppModel, ModelConfig


def make_model(d_f=2, m=3, seed=0, **kw):
    model = CntppModel(ModelConfig(d_f=d_f, n_components=m, hidden=16, embed=8, head_width=12, dropout=0.0, **kw),
                       seed=seed)
    return model.eval()


def history(d_f=2, n=5, seed=0):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.2, 2.0, n))
    ev = []
    for i in range(n):
        f = rng.normal(size=d_f)
        ev.append(engagement(t[i], f, int(i)) if i % 2 else generation(t[i], f))
    return EventSequence(0, tuple(ev))


def zero_last(net, bias):
    with torch.no_grad():
        # positive layers store softplus-reparameterised weights; softplus(-1e3) underflows to 0
        net.weights[-1].fill_(-1e3 if net.positive else 0.0)
        net.biases[-1].copy_(torch.as_tensor(bias, dtype=torch.float64))


def pin_unit_process(model):
    """λ ≡ 1 and marks ~ N(0, I) regardless of h."""
    heads = model.outcome
    zero_last(heads.intensity.net, [0.0])
    with torch.no_grad():
        heads.intensity.floor.copy_(torch.tensor(math.log(math.e - 1)))
    zero_last(heads.marks.weight_net, torch.zeros(heads.marks.m))
    zero_last(heads.marks.log_sigma_net, torch.zeros(heads.marks.m))
    for net in heads.marks.mean_nets:
        zero_last(net, torch.zeros(heads.marks.d_f))
