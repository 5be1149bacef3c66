"""Train one generator on four synthetic waveform families and use it, without
fine-tuning, to poison a fifth family under the TSBA-B protocol.

    python demos/03_universal_generator.py [iterations]
"""
import sys

from tsbackdoor.attacks import AttackConfig, train_universal
from tsbackdoor.data import SyntheticSpec, make_synthetic, train_test_split
from tsbackdoor.evaluation import evaluate_fold, run_attack
from tsbackdoor.models import build_universal_generator

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 4
families = ["sine", "square", "sawtooth", "triangle"]
sources = [make_synthetic(SyntheticSpec(per_class=100, seed=10 + i, waveform=w, name=w)) for i, w in enumerate(families)]

g = build_universal_generator(1, seed=0)
g = train_universal(g, sources, iterations, AttackConfig(clean_epochs=20, backdoor_epochs=15),
                    callback=lambda it, info: print(f"iteration {it}: {info['dataset']} -> class {info['target']}"))

chirp = make_synthetic(SyntheticSpec(per_class=200, seed=99, waveform="chirp", name="chirp"))
train, test = train_test_split(chirp, 0.5, 0)
train, val = train_test_split(train, 0.2, 0)
cfg = AttackConfig(clean_epochs=20, backdoor_epochs=60, patience=20)
for attack, gen in (("tsba_b", None), ("universal", g)):
    row = evaluate_fold(run_attack(attack, train, cfg, "fcn", val, generator=gen), test, cfg.target_class)
    print(f"{attack:10s} CA {row['ca']:5.1f}  ASR {row['asr']:5.1f}  rms_all {row['rms_all']:.4f}")
