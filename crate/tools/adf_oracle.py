"""Reference values for the ADF implementation.

Prints (1) statsmodels ADF statistics for deterministic series that the Rust
tests rebuild bit-for-bit, and (2) Monte Carlo percentiles of the statistic
for white noise and random walks of length 2000 over 500 seeds.

    python3 tools/adf_oracle.py
"""

import numpy as np
from statsmodels.tsa.stattools import adfuller


def schwert(t):
    return int(np.floor(12.0 * (t / 100.0) ** 0.25))


def capped_lag(t):
    # keep at least 10 residual degrees of freedom: (t - 1 - p) - (p + 2) >= 10
    return min(schwert(t), (t - 13) // 2)


def logistic(n, x0=0.123):
    out = []
    x = x0
    for _ in range(n):
        x = 3.9 * x * (1.0 - x)
        out.append(x)
    return np.array(out)


def fixtures():
    n = 300
    chaos = logistic(n) - 0.5
    yield "logistic_noise", chaos
    yield "logistic_walk", np.cumsum(chaos)
    t = np.arange(200, dtype=float)
    noise = logistic(200, 0.77) - 0.5
    yield "sine_trend", np.sin(0.7 * t) + 0.5 * np.sin(1.9 * t + 1.0) + 0.01 * t + noise
    yield "short_logistic", logistic(25, 0.31)


def main():
    print("# deterministic fixtures: name, T, lag, statistic")
    for name, y in fixtures():
        lag = capped_lag(len(y))
        stat = adfuller(y, maxlag=lag, regression="c", autolag=None)[0]
        print(f"{name} {len(y)} {lag} {float(stat)!r}")

    t = 2000
    lag = capped_lag(t)
    wn, rw = [], []
    for seed in range(500):
        rng = np.random.default_rng(seed)
        e = rng.standard_normal(t)
        wn.append(adfuller(e, maxlag=lag, regression="c", autolag=None)[0])
        rw.append(adfuller(np.cumsum(e), maxlag=lag, regression="c", autolag=None)[0])
    print(f"# monte carlo, T={t}, lag={lag}, 500 seeds")
    print(f"random_walk_p95 {float(np.percentile(rw, 95))!r}")
    print(f"white_noise_p05 {float(np.percentile(wn, 5))!r}")
    print(f"random_walk_median {float(np.median(rw))!r}")
    print(f"white_noise_median {float(np.median(wn))!r}")


if __name__ == "__main__":
    main()
