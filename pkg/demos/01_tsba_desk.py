"""Co-train an FCN and a trigger generator on synthetic sine data, then compare
against a clean model and look at one poisoned sample.

    python demos/01_tsba_desk.py [seed]
"""
import sys

from tsbackdoor.attacks import AttackConfig
from tsbackdoor.data import SyntheticSpec, make_synthetic, train_test_split
from tsbackdoor.evaluation import clean_accuracy, evaluate_fold, run_attack, train_clean
from tsbackdoor.plotting import plot_sample

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0

data = make_synthetic(SyntheticSpec(classes=2, per_class=200, length=128, seed=seed))
train, test = train_test_split(data, 0.5, seed)
train, val = train_test_split(train, 0.2, seed)
cfg = AttackConfig(poison_rate=0.1, clip_fraction=0.1, clean_epochs=20, backdoor_epochs=60, patience=20, seed=seed)

clean = train_clean(train, cfg, "fcn", val)
print(f"clean model: CA {clean_accuracy(clean, test):.1f}")

out = run_attack("tsba_a", train, cfg, "fcn", val)
row = evaluate_fold(out, test, cfg.target_class)
print(f"TSBA-A: CA {row['ca']:.1f}  ASR {row['asr']:.1f}  rms_all {row['rms_all']:.4f}  rms_top1 {row['rms_top1']:.4f}")

# plot_sample rechecks the 10% budget before drawing
victim = test.X[test.y != cfg.target_class][0]
paths = plot_sample(victim, out.stamp(victim[None])[0], "demo_victim", "demo_plots",
                    model=out.model, clip_fraction=cfg.clip_fraction)
print("figures:", ", ".join(paths.values()))
