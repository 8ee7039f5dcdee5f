"""Write an ETTh1-shaped synthetic CSV for smoke runs when the real file is absent."""

import argparse

import numpy as np

from umamba.data import synthetic_ett, write_csv


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("output")
    p.add_argument("--rows", type=int, default=17420)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    ds = synthetic_ett(args.rows, np.random.default_rng(args.seed))
    write_csv(args.output, ds)
    print(f"wrote {args.output}: {ds.rows} rows x {ds.n_channels} channels")


if __name__ == "__main__":
    main()
