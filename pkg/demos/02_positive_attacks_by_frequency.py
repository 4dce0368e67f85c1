"""
Who gets attacked most easily?
==============================

Positive-targeted attacks remove a correctly predicted label from the
top-5. Grouping targets by how often their label appears in training shows
rare labels falling far more easily than common ones.
"""

# %%
from advxmtc.experiments import SyntheticSetup, frequency_vulnerability, rebalanced_robustness

setup = SyntheticSetup.build(seed=0)
report = frequency_vulnerability(setup)

print("freq range      attacks  success %  similarity  change %")
for b in report.per_bin:
    sim = "-" if b.mean_similarity is None else f"{b.mean_similarity:.3f}"
    cr = "-" if b.mean_change_rate_pct is None else f"{b.mean_change_rate_pct:.2f}"
    print(f"{b.bin_lo:4d}-{b.bin_hi:<9d} {b.n_attacks:7d}  {b.success_rate_pct:9.1f}  {sim:>10s}  {cr:>8s}")

# %%
# One attack up close: which words were swapped, and how far did the
# target's score fall?
from advxmtc.attack import AttackGoal, run_attack
from advxmtc.evaluation import sample_attack_targets

oracle = setup.oracle("plain")
bins = setup.bins()
doc_id, target = sample_attack_targets(setup.test, oracle, "positive-targeted", bins, per_bin=1, seed=3)[0]
doc = setup.test.documents[doc_id]
out = run_attack(oracle, setup.provider(), doc, AttackGoal.positive({target}), setup.attack_config())
print(f"\ntarget label {target}: success={out.success}, {len(out.steps)} swaps, {out.queries} queries")
for s in out.steps:
    print(f"  position {s.position:3d}: {s.old!r} -> {s.new!r}  (score drop {s.delta:.3f})")
print("before:", oracle(doc.tokens)[target].round(3), " after:", oracle(out.adversarial.tokens)[target].round(3))

# %%
# Retraining with the PW-cb loss and attacking the same samples.
plain, rebalanced = rebalanced_robustness(setup)
print("\nrarest bin success, plain: %.1f%%  PW-cb: %.1f%%"
      % (plain.success_rates()[0], rebalanced.success_rates()[0]))
