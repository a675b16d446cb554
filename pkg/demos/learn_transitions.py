"""Learn a transition matrix from a simulated chain.

The emissions are nearly deterministic, so the hidden path is almost
observable and the learned matrix should match the empirical transition
frequencies of the sampled path.
"""
import numpy as np

from trackfusion import AnnotatedHistory, HmmParams, ObservableLayout, ObservableModel, build_state_space, train
from trackfusion.emissions import TiedBetaEstimator, tracker_tie_groups

rng = np.random.default_rng(36)
space = build_state_space(2)
layout = ObservableLayout.uniform(2)
true_a = np.array([
    [0.90, 0.04, 0.04, 0.02],
    [0.00, 0.90, 0.05, 0.05],
    [0.00, 0.06, 0.88, 0.06],
    [0.00, 0.10, 0.10, 0.80],
])
bits = space.bits.astype(bool)
model = ObservableModel(np.where(bits, 400.0, 4.0), np.where(bits, 4.0, 400.0))

T = 5000
states = np.zeros(T, dtype=int)
for t in range(1, T):
    states[t] = rng.choice(4, p=true_a[states[t - 1]])
frames = rng.beta(model.p[states], model.q[states])
history = AnnotatedHistory(frames, ((T - 1, int(states[-1])),))

counts = np.zeros((4, 4))
np.add.at(counts, (states[:-1], states[1:]), 1.0)

est = TiedBetaEstimator(tracker_tie_groups(space, layout), space.size, layout.m, min_mass=5.0)
result = train(HmmParams.default(layout), history, max_iters=20, estimator=est)

np.set_printoptions(precision=3, suppress=True)
print("log-likelihood per iteration:", np.round(result.log_likelihoods, 1))
print("empirical transition frequencies:")
print(counts / counts.sum(axis=1, keepdims=True))
print("learned transitions:")
print(result.params.transitions)
