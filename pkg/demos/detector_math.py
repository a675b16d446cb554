"""The statistics behind a feature-matching detector, without any images."""
from trackfusion import FeatureMatchStats, correspondence_test, detection_threshold, inlier_cost, normal_cdf

stats = FeatureMatchStats(mu=0.5, sigma=0.1)
print(f"P(distance <= mu - 3 sigma) = {normal_cdf(0.2, stats.mu, stats.sigma):.5f}")

for d_fg, d_bg in [(0.05, 0.5), (0.05, 0.055), (0.2, 0.5), (0.45, 1.0)]:
    res = correspondence_test(d_fg, d_bg, stats)
    print(f"match at {d_fg}, background at {d_bg}: ratio {res.ratio:.2f}, cdf {res.cdf:.2e} ->",
          "accept" if res else "reject")

weights = [0.5, 0.25, 0.25]
print("weighted inliers:", inlier_cost(weights, [True, False, True]))
for k in (0, 100, 250, 500):
    print(f"support needed with {k} target features: {detection_threshold(k)}")
