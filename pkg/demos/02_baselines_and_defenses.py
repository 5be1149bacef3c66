"""Backdoor the same data with a fixed vanilla block and with TSBA-A, then run
Neural Cleanse and Fine-Pruning on both. The defender gets half of the test
split; the other half measures the effect.

    python demos/02_baselines_and_defenses.py
"""
from tsbackdoor.attacks import AttackConfig
from tsbackdoor.data import SyntheticSpec, make_synthetic, train_test_split
from tsbackdoor.defenses import fine_prune, neural_cleanse
from tsbackdoor.evaluation import attack_success_rate, clean_accuracy, evaluate_fold, run_attack

data = make_synthetic(SyntheticSpec(classes=2, per_class=200, length=128, seed=0))
train, test = train_test_split(data, 0.5, 0)
train, val = train_test_split(train, 0.2, 0)
defender, held = train_test_split(test, 0.5, 0)
cfg = AttackConfig(clean_epochs=20, backdoor_epochs=60, patience=20)

for attack in ("vanilla_fixed", "static_noise", "tsba_a"):
    out = run_attack(attack, train, cfg, "fcn", val)
    row = evaluate_fold(out, test, cfg.target_class)
    print(f"{attack:14s} CA {row['ca']:5.1f}  ASR {row['asr']:5.1f}  rms_all {row['rms_all']:.4f}")
    if attack == "static_noise":
        continue

    def evaluator(model, stamp=out.stamp):
        return clean_accuracy(model, held), attack_success_rate(model, stamp, held, cfg.target_class)

    nc = neural_cleanse(out.model, defender, evaluator=evaluator)
    fp = fine_prune(out.model, defender, prune_rate=0.3, evaluator=evaluator)
    print(f"{'':14s} NC dCA {nc.delta_ca:+6.1f} dASR {nc.delta_asr:+6.1f}  anomaly {max(nc.artifacts['anomaly_index']):.2f}")
    print(f"{'':14s} FP dCA {fp.delta_ca:+6.1f} dASR {fp.delta_asr:+6.1f}")
