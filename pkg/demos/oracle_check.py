"""Scaled forward-backward against brute-force enumeration on a tiny instance.

Two trackers, six frames, one detection at frame 3 that says tracker 0 is
still on target and tracker 1 has failed. The recursions and the oracle
should agree to rounding.
"""
import numpy as np

from trackfusion import (
    AnnotatedHistory,
    HmmParams,
    ObservableLayout,
    brute_force,
    build_state_space,
    forward_backward,
    smoothed_posteriors,
)

space = build_state_space(2)
params = HmmParams.default(ObservableLayout.uniform(2))
frames = np.array([[0.9, 0.8], [0.85, 0.4], [0.8, 0.1], [0.7, 0.75], [0.2, 0.8], [0.1, 0.9]])
# frame 3 is index 2; the annotated state is (1, 0)
history = AnnotatedHistory(frames, ((2, space.index_of((1, 0))),))

cache = forward_backward(params, history)
ref = brute_force(params, history)

print("states:", [space.label(i) for i in range(space.size)])
print(f"log-likelihood  recursion {cache.log_likelihood:.12f}  enumeration {ref.log_likelihood:.12f}")
np.set_printoptions(precision=4, suppress=True)
print("smoothed posteriors (rows = frames):")
print(smoothed_posteriors(cache))
print("largest difference from enumeration:", np.abs(smoothed_posteriors(cache) - ref.smoothed).max())
