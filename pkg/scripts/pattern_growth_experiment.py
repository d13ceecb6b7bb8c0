#!/usr/bin/env python3
"""Pattern-count growth experiment: fit the segmentation model on nested
prefixes of a synthetic 8-state sequence and report the median number of
discovered patterns per data size.

Usage: python scripts/pattern_growth_experiment.py [T] [iterations]
"""
import sys

import numpy as np

from lanescope import analysis, bnp, codec, synth


def main() -> int:
    T = int(sys.argv[1]) if len(sys.argv) > 1 else 8000
    iterations = int(sys.argv[2]) if len(sys.argv) > 2 else 200

    spec = synth.HmmSpec(K=8, T=T, self_prob=0.95,
                         covariances=synth.default_covariances(8, spread=1.9), seed=11)
    features, _ = synth.gen_hmm_sequence(spec)
    std_features, _ = codec.standardize(features)

    fractions = [500 / T, 2000 / T, 1.0]
    curve = analysis.pattern_count_curve(std_features, bnp.HdpHmmHyper(),
                                         fractions=fractions, seeds=[0, 1, 2, 3, 4],
                                         iterations=iterations)
    print("frames  median_patterns")
    for fraction, median in sorted(curve.items()):
        print(f"{int(np.ceil(fraction * T)):6d}  {median:.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
