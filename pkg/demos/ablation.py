"""Four-variant ablation: what each adjustment block buys you.

Trains full / no-back-door / no-front-door / neither on the same splits
and tabulates test MSE, accuracy, and the fairness gaps.

Run:  python3 demos/ablation.py
"""

from dcan import evaluate as ev
from dcan.data import ScmConfig, generate_scm, split
from dcan.model import TrainConfig

SEED = 0


def main():
    ds = generate_scm(ScmConfig(n_samples=600, rho_obs=0.8, seed=SEED, anti_correlate_test=True))
    splits = split(ds, "tail", seed=SEED)
    cfg = TrainConfig(epochs=10, batch_size=32, lr=1e-3, weight_decay=1e-4, seed=SEED, d=32, heads=4)
    rows = ev.run_ablation(splits, cfg, dict_sizes={"m_size": 16, "n_size": 16})

    header = f"{'variant':<18}{'test_mse':>10}{'acc':>8}{'dp':>8}{'eo':>8}"
    print(header)
    print("-" * len(header))
    for row in rows:
        eo = f"{row['eo_overall']:.4f}" if row["eo_overall"] is not None else "n/a"
        dp = f"{row['dp_overall']:.4f}" if row["dp_overall"] is not None else "n/a"
        print(f"{row['variant']:<18}{row['test_mse']:>10.4f}{row['acc']:>8.4f}{dp:>8}{eo:>8}")


if __name__ == "__main__":
    main()
