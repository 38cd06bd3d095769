"""End to end on synthetic data: generate, train, evaluate, check gradients.

Run:  python3 demos/04_train_synthetic.py   (about a minute on one core)
"""

import tempfile
from pathlib import Path

from lifq import (
    ModelConfig,
    QualityModel,
    SplitSpec,
    TrainConfig,
    evaluate_model,
    run_gradcheck_suite,
    split,
    synth_generate,
    train,
)

work = Path(tempfile.mkdtemp(prefix="lifq-demo-"))
dims = ((6, 6, 8), (3, 3, 16))

# Labels come from a planted, noise-free function of the feature maps, so a
# model that reads both stages can order held-out images almost perfectly.
manifest = synth_generate(200, seed=0, dims=dims, out_dir=work)
train_ids, test_ids = split(manifest, SplitSpec(seed=0, run_index=0))
print(f"dataset: {len(train_ids)} train / {len(test_ids)} test -> {work}")

model = QualityModel(ModelConfig.small(), c3=dims[0][2], c4=dims[1][2], seed=0)
print(f"model parameters: {model.num_parameters():,}")

config = TrainConfig(learning_rate=1e-3, epochs=6, batch_size=32,
                     decay_every=10 ** 9, seed=0)
result = train(manifest, work, train_ids, model, config,
               on_epoch=lambda epoch, loss: print(
                   f"  epoch {epoch}: total {loss.total:.4f} "
                   f"(main {loss.main:.4f})"))

srocc_value, plcc_value = evaluate_model(manifest, work, test_ids, model)
print(f"held-out srocc={srocc_value:.4f} plcc={plcc_value:.4f}")

report = run_gradcheck_suite(seed=0)
print(f"gradient suite max rel err: {max(report.values()):.2e}")
