from __future__ import annotations

import argparse
import logging
from pathlib import Path

from generalized_cut_posterior.hpv import simulate_hpv
from generalized_cut_posterior.random_effects import re_simulate

logger = logging.getLogger(__name__)


def simulate(*, model: str, out: Path, seed: int, n_countries: int, N: int, J: int) -> Path:
    if model == "hpv":
        path = simulate_hpv(n_countries, seed).to_csv(out)
    else:
        path = re_simulate(N=N, J=J, seed=seed).to_csv(out)
    logger.info("wrote %s", path)
    return path


def _parse_args() -> argparse.Namespace:
    p = argparse.ArgumentParser(
        description="Write a simulated HPV or random-effects table usable as model.data."
    )
    p.add_argument("model", choices=["hpv", "re"])
    p.add_argument("--out", type=Path, required=True, help="CSV path to write.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-countries", type=int, default=13, help="HPV rows.")
    p.add_argument("--N", type=int, default=100, help="Random-effects groups.")
    p.add_argument("--J", type=int, default=10, help="Replicates per group.")
    return p.parse_args()


def main() -> None:
    args = _parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    simulate(
        model=args.model,
        out=args.out,
        seed=args.seed,
        n_countries=args.n_countries,
        N=args.N,
        J=args.J,
    )


if __name__ == "__main__":
    main()
