"""
Pushing an absent label into the top-5
======================================

Negative-targeted attacks try to make the victim predict a label the
document does not carry. Picking documents that already hold a label from
the target's cluster gives the attack a head start.
"""

# %%
from advxmtc.experiments import SyntheticSetup, clustering_effect

setup = SyntheticSetup.build(seed=1)
tree = setup.tree()
leaves = tree.leaves()
print(len(leaves), "leaves; sizes from", min(map(len, leaves)), "to", max(map(len, leaves)))
print("first leaves:", leaves[:3])

# %%
# Candidate documents for one label: those carrying a cluster sibling.
from advxmtc.clustering import candidate_documents

label = leaves[0][0]
nt = candidate_documents(label, tree, setup.test)
print(f"label {label}: {len(nt)} of {len(setup.test)} test documents share its leaf")

# %%
restricted, unrestricted = clustering_effect(setup)
print("negative-targeted success with cluster sampling:    %.1f%% of %d"
      % (restricted.overall.success_rate_pct, restricted.overall.n_attacks))
print("negative-targeted success with unrestricted sampling: %.1f%% of %d"
      % (unrestricted.overall.success_rate_pct, unrestricted.overall.n_attacks))

# %%
# Reports export to CSV for plotting elsewhere.
import tempfile
from pathlib import Path

from advxmtc.evaluation import export_report

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "negative.csv"
    export_report(restricted, path, fmt="csv")
    print(path.read_text())
