"""How an auxiliary tensor that shares two modes helps as X gets sparser.

X (30x30x30) and Y (30x30x30) share their first two factor matrices. Y is
half observed; X is masked at 90%, 95% and 99% with nested masks. A single
model sees only X, the coupled model also trains on Y.
Run with ``python demos/coupling_sweep.py`` (a few minutes on one core).
"""
from mlctr.models import ModelSpec, build_coupled, build_single
from mlctr.sparse import SplitSpec, split
from mlctr.synth import SynthSpec, generate, mask, nested_masks
from mlctr.training import TrainConfig, evaluate, train

levels = (0.90, 0.95, 0.99)
data = generate(SynthSpec(dims=(30, 30, 30, 30), true_rank=2, coupled=True,
                          factor_dist="offset-normal", seed=0))
ytr, yva, _ = split(mask(data.y, 0.5, seed=1000), SplitSpec(seed=1))
xs = nested_masks(data.x, levels, seed=0)
spec = ModelSpec(rank=2, layers=2, hidden=2)
cfg = TrainConfig(lr=0.02, batch_size=32, max_epochs=300, patience=10)

print("sparsity  single    coupled")
for level in levels:
    xtr, xva, xte = split(xs[level], SplitSpec(seed=0))
    single = train(build_single(xtr.dims, spec), xtr, xva, cfg)
    coupled = train(build_coupled(xtr.dims, ytr.dims, spec), (xtr, ytr), (xva, yva), cfg)
    print(f"{level:8.2f}  {evaluate(single.model, xte).rmse:.4f}    "
          f"{evaluate(coupled.model, xte).rmse:.4f}")
