"""
Shared builders for the test suite.
"""

import numpy as np

from src.encoder import NUM_RESERVED, LabeledInstance, MarkedCorpus
from src.flow import FlowParams, FrozenSchedule, initial_w_prime, project_w
from src.model import init_model


def random_instance(rng, num_classes=3, vocab_size=30, length=10, bag_id="bag-0"):
    tokens = tuple(int(t) for t in rng.integers(NUM_RESERVED, vocab_size, size=length))
    start1 = int(rng.integers(0, length // 2))
    end1 = int(rng.integers(start1, length // 2))
    start2 = int(rng.integers(length // 2, length))
    end2 = int(rng.integers(start2, length))
    label = int(rng.integers(num_classes))
    return LabeledInstance(tokens=tokens, span_e1=(start1, end1), span_e2=(start2, end2),
                           noisy_label=label, true_label=label, bag_id=bag_id)


def random_corpus(seed=0, size=8, num_classes=3, vocab_size=30, length=10):
    rng = np.random.default_rng(seed)
    instances = [random_instance(rng, num_classes, vocab_size, length, bag_id=f"bag-{i // 2}")
                 for i in range(size)]
    return instances, MarkedCorpus.from_instances(instances, max_len=32)


def random_transition_values(rng, num_classes):
    values = np.zeros((num_classes, num_classes))
    for column in range(num_classes):
        others = [row for row in range(num_classes) if row != column]
        values[others, column] = rng.dirichlet(np.ones(num_classes - 1))
    return values


def trainable_flow(rng, num_classes, norm_target=1.0):
    """A flow with every parameter away from its initial value."""
    return FlowParams(
        u=rng.normal(0.0, 0.5, num_classes),
        w=project_w(rng.normal(0.0, 1.0, num_classes), norm_target),
        beta=np.array(rng.normal(0.0, 0.3)),
        w_prime=initial_w_prime(num_classes, 0.1) + rng.normal(0.0, 0.1, num_classes),
        norm_target=norm_target,
        schedule=FrozenSchedule.trainable(),
    )


def small_model(seed=0, num_classes=3, vocab_size=30, flow=True):
    rng = np.random.default_rng(seed)
    params = init_model(num_classes, vocab_size, rng, embed_dim=6, feature_dim=5)
    params.head_bias[...] = rng.normal(0.0, 0.3, num_classes)
    params.z_bias[...] = 0.4
    if flow:
        params.flow = trainable_flow(rng, num_classes)
    params.transition.values[...] = random_transition_values(rng, num_classes)
    return params
