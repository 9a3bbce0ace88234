"""
Monte Carlo dataset, tuning and cross-validation at desk scale
==============================================================

A 25-per-line dataset (400 rows) is enough to see the whole pipeline;
the command line runs the same steps at 500 per line.
"""

from ptsvm import load_ieee14
from ptsvm.metrics import cross_validate
from ptsvm.scenario import generate_dataset, kfold_split
from ptsvm.svm import TrainConfig
from ptsvm.tuning import SearchSpace, grid_search

net = load_ieee14()
ds = generate_dataset(net, 25, seed=5)
print(len(ds), "rows,", int(ds.labels.sum()), "unstable")
print(ds.to_csv().splitlines()[:4])

space = SearchSpace(log2C=(1, 3, 5, 7), log2gamma=(-5, -3, -1, 1))
res = grid_search(ds, space, K=5, seed=0)
print("best:", res.best, "mean CA", round(res.best_score.mean, 4))

rep = cross_validate(ds, res.best.kernel_spec(), TrainConfig(C=res.best.C),
                     kfold_split(len(ds), 5, 0, ds.labels))
print(rep.to_text())

# a linear kernel on the same folds, for comparison
lin = grid_search(ds, SearchSpace(log2C=(-1, 1, 3, 5, 7), kernels=("linear",)), K=5, seed=0)
print("linear best mean CA", round(lin.best_score.mean, 4))
