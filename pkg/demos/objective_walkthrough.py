"""
The episode loss and the global loss on a toy embedding space
=============================================================

Queries are scored against prototypes (the mean support embedding of each
speaker) by a cosine that keeps the query norm. Every sample is also scored
against a learnable prototype per training speaker.
"""

import torch

from metaspeaker import LossConfig, combined_loss
from metaspeaker.objective import compute_prototypes, scaled_cosine

torch.manual_seed(0)

## Two speakers, two supports and one query each, 3-d embeddings
support = torch.tensor([[1.0, 0.1, 0.0], [0.9, -0.1, 0.0], [0.0, 1.0, 0.2], [0.1, 0.8, 0.0]])
s_lab = torch.tensor([0, 0, 1, 1])
query = torch.tensor([[2.0, 0.3, 0.0], [0.2, 1.5, 0.1]])
q_lab = torch.tensor([0, 1])

protos = compute_prototypes(support, s_lab)
print("prototypes:\n", protos)
print("query logits:\n", scaled_cosine(query, protos))

## Four training speakers in total; the episode used global speakers 2 and 0
omega = torch.randn(4, 3)
s_glob = torch.tensor([2, 2, 0, 0])
q_glob = torch.tensor([2, 0])

for mode in ("vanilla", "meta", "meta_global"):
    out = combined_loss(support, s_lab, query, q_lab, omega, s_glob, q_glob, LossConfig(mode=mode))
    print(mode, {k: None if v is None else round(v, 4) for k, v in out.as_floats().items()})

## Rescaling the global prototypes changes nothing
a = combined_loss(support, s_lab, query, q_lab, omega, s_glob, q_glob, LossConfig()).total
b = combined_loss(support, s_lab, query, q_lab, 3.7 * omega, s_glob, q_glob, LossConfig()).total
print("loss with omega and 3.7 * omega:", float(a), float(b))
