"""Linear 3-class sentiment head over soft document representations, with the
label-flipping adversarial loss.

The adversarial pair shares one posterior sample and one set of Gumbel noises;
only the brand score is negated, so the two representations differ exactly
through the polarity pathway.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .corpus import Polarity


class SentimentClassifier(nn.Module):
    """One linear layer: V soft counts -> 3 polarity logits. Zero-initialized,
    so an untrained classifier emits uniform probabilities."""

    def __init__(self, num_terms: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(3, num_terms, dtype=torch.float64))
        self.bias = nn.Parameter(torch.zeros(3, dtype=torch.float64))

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        return z @ self.weight.T + self.bias

    forward = logits


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-example -log softmax(logits)[label], via log-sum-exp."""
    log_norm = torch.logsumexp(logits, dim=-1)
    labels = torch.as_tensor(labels)
    picked = logits.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return log_norm - picked


def flip_label(label):
    """Swap NEG and POS; NEU is its own opposite. Works on ints and tensors."""
    if isinstance(label, torch.Tensor):
        return 2 - label
    return Polarity(2 - int(label))


@dataclass
class AdversarialPair:
    """Soft representations from x and -x (same sample and noise) plus labels."""

    z: torch.Tensor
    z_rev: torch.Tensor
    labels: torch.Tensor
    flipped_labels: torch.Tensor

    @classmethod
    def from_labels(cls, z, z_rev, labels) -> "AdversarialPair":
        return cls(z=z, z_rev=z_rev, labels=labels, flipped_labels=flip_label(labels))


def adversarial_losses(clf: SentimentClassifier,
                       pair: AdversarialPair) -> tuple[torch.Tensor, torch.Tensor]:
    """(supervised, adversarial) cross-entropy, each a mean over the batch."""
    supervised = cross_entropy(clf.logits(pair.z), pair.labels).mean()
    adversarial = cross_entropy(clf.logits(pair.z_rev), pair.flipped_labels).mean()
    return supervised, adversarial
