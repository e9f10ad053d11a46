"""Differentiable losses for AET, AVT, SAT and the semi-supervised combination.

Every function returns quantities to *minimize*; maximizing the variational
bounds corresponds to minimizing the negative log-likelihood terms here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, InputError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)


def _reduce(per_example: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return dc.mean(per_example)
    if reduction == "none":
        return per_example
    raise ConfigError(f"unknown reduction {reduction!r}")


def _as_2d(t) -> Tensor:
    t = dc.as_tensor(t)
    return dc.reshape(t, (1, -1)) if t.ndim == 1 else t


def aet_loss(t_target, t_hat, reduction: str = "mean") -> Tensor:
    """Mean squared error over target dimensions (averaged over the batch)."""
    t_target, t_hat = _as_2d(t_target), _as_2d(t_hat)
    if t_target.shape != t_hat.shape:
        raise ShapeError(f"aet_loss: target {t_target.shape} vs prediction {t_hat.shape}")
    return _reduce(dc.mean(dc.square(dc.sub(t_hat, t_target)), axis=1), reduction)


def gaussian_nll(t_target, mean, logvar, reduction: str = "mean") -> Tensor:
    """0.5 * sum_i [(t_i - d_i)^2 exp(-logvar_i) + logvar_i + log 2pi]."""
    t_target, mean, logvar = _as_2d(t_target), _as_2d(mean), _as_2d(logvar)
    if not t_target.shape == mean.shape == logvar.shape:
        raise ShapeError(
            f"gaussian_nll: target {t_target.shape}, mean {mean.shape}, logvar {logvar.shape}"
        )
    resid = dc.square(dc.sub(t_target, mean))
    inner = dc.add(dc.add(dc.mul(resid, dc.exp(dc.neg(logvar))), logvar), LOG_2PI)
    return _reduce(dc.mul(dc.sum(inner, axis=1), 0.5), reduction)


def nll_index(logprobs, index, reduction: str = "mean") -> Tensor:
    """Negative log-probability of integer class ``index`` per row."""
    logprobs = _as_2d(logprobs)
    index = np.atleast_1d(np.asarray(index))
    n, k = logprobs.shape
    if index.shape != (n,):
        raise ShapeError(f"need {n} class indices, got shape {index.shape}")
    if not np.issubdtype(index.dtype, np.integer) or index.min() < 0 or index.max() >= k:
        raise InputError(f"class indices must be integers in [0, {k}), got {index}")
    picked = dc.getitem(logprobs, (np.arange(n), index))
    return _reduce(dc.neg(picked), reduction)


def avt_objective(decoder_out, t_target, reduction: str = "mean") -> Tensor:
    """Negative surrogate log-likelihood of the applied transformation.

    Gaussian decoders take a real target vector; categorical decoders take the
    transformation class index.
    """
    if decoder_out.mode == "gaussian":
        return gaussian_nll(t_target, decoder_out.mean, decoder_out.logvar, reduction)
    if decoder_out.mode == "categorical":
        return nll_index(dc.log_softmax(decoder_out.logits, axis=1), t_target, reduction)
    raise ConfigError(f"unknown decoder mode {decoder_out.mode!r}")


def entropy_min(class_logprobs, reduction: str = "mean") -> Tensor:
    """Mean Shannon entropy of the predicted label distributions."""
    lp = dc.clip(_as_2d(class_logprobs), -1e4, np.inf)
    ent = dc.neg(dc.sum(dc.mul(dc.exp(lp), lp), axis=1))
    return _reduce(ent, reduction)


@dataclass
class LossBreakdown:
    total: Tensor
    transformation_term: float
    label_term: float = 0.0
    entmin_term: float = 0.0
    lam: float = 1.0
    entmin_weight: float = 0.0

    def record(self) -> dict:
        return {
            "total": float(self.total.data),
            "transformation_term": self.transformation_term,
            "label_term": self.label_term,
            "entmin_term": self.entmin_term,
        }


def _f(t) -> float:
    return float(np.asarray(t.data if isinstance(t, Tensor) else t))


def sat_objective(class_logprobs, y_true, decoder_out, t_target) -> LossBreakdown:
    """Label cross-entropy plus transformation NLL, weighted equally."""
    label = nll_index(class_logprobs, y_true)
    trans = avt_objective(decoder_out, t_target)
    return LossBreakdown(dc.add(trans, label), _f(trans), _f(label), lam=1.0)


def semisup_objective(
    unlabeled_terms,
    labeled_terms,
    lam: float = 1.0,
    entmin=None,
    entmin_weight: float = 0.0,
) -> LossBreakdown:
    """Combine per-example terms into the semi-supervised loss.

    ``unlabeled_terms`` holds per-example transformation losses of unlabeled
    examples; ``labeled_terms`` is a pair ``(transformation_losses,
    label_losses)`` for the labeled ones.  The transformation term averages
    over every example, the label term over labeled ones only::

        total = mean(all transformation terms) + lam * mean(label terms)
                + entmin_weight * entmin
    """
    if lam < 0:
        raise ConfigError(f"lambda must be nonnegative, got {lam}")
    if entmin_weight < 0:
        raise ConfigError(f"entmin weight must be nonnegative, got {entmin_weight}")
    lab_trans, lab_label = labeled_terms if labeled_terms is not None else (None, None)
    parts = [dc.reshape(dc.as_tensor(t), (-1,)) for t in (unlabeled_terms, lab_trans)
             if t is not None and dc.as_tensor(t).size]
    if not parts:
        raise InputError("semisup_objective needs at least one example")
    trans = dc.mean(dc.concat(parts, axis=0) if len(parts) > 1 else parts[0])
    total = trans
    label_val = 0.0
    if lab_label is not None and dc.as_tensor(lab_label).size:
        label = dc.mean(lab_label)
        label_val = _f(label)
        if lam:
            total = dc.add(total, dc.mul(label, lam))
    ent_val = 0.0
    if entmin is not None:
        ent_val = _f(entmin)
        if entmin_weight:
            total = dc.add(total, dc.mul(entmin, entmin_weight))
    return LossBreakdown(total, _f(trans), label_val, ent_val, lam, entmin_weight)
