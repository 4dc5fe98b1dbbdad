# %%
import os

import pandas as pd

from kron_fc import ROOT
from kron_fc.accounting import model_params, replaced_layer_params
from kron_fc.cli import main
from kron_fc.formats import load_checkpoint, load_mnist, save_checkpoint
from kron_fc.linalg import Rng
from kron_fc.presets import PRESET_VERSION, PRESETS, build_model
from kron_fc.train import TrainConfig, evaluate, train


# %% one 10-epoch run per preset and seed, as in configs/
data_dir = os.environ.get("KFC_MNIST_DIR", f"{ROOT}/data/mnist")
out_dir = f"{ROOT}/data/runs"
os.makedirs(out_dir, exist_ok=True)
train_set, val_set, test_set = load_mnist(data_dir, patch=4)

records = []
for model_name in PRESETS:
    for seed in (1, 2, 3):
        config = TrainConfig(model=model_name, epochs=10, lr=1e-3, seed=seed)
        init_rng, train_rng = Rng(seed).split(2)
        model = build_model(config, init_rng)
        result = train(model, train_set, val_set, config, train_rng, progress=True)
        model.restore(result.snapshot)
        test_error = evaluate(model, test_set, workers=4)
        meta = {
            "method": model_name,
            "preset_version": PRESET_VERSION,
            "seed": seed,
            "epoch": result.best_epoch,
            "val_error": result.best_val_error,
            "test_error": test_error,
        }
        save_checkpoint(f"{out_dir}/{model_name}-seed{seed}.kfc", model, meta)
        records.append(
            {
                **meta,
                "layer_params": replaced_layer_params(model),
                "model_params": model_params(model),
            }
        )


# %%
df = pd.DataFrame(records)
df.to_csv(f"{out_dir}/summary.csv", index=False)
summary = df.groupby("method").agg(
    layer_params=("layer_params", "first"),
    model_params=("model_params", "first"),
    test_error=("test_error", "mean"),
    test_error_std=("test_error", "std"),
)
print(summary.sort_values("test_error"))


# %% rank-10 NKP of each trained baseline, then 2 epochs of finetuning
tuned = []
for seed in (1, 2, 3):
    baseline = f"{out_dir}/mnist-mlp-baseline-seed{seed}.kfc"
    compressed = f"{out_dir}/kfc2-rank10-seed{seed}.kfc"
    finetuned = f"{out_dir}/kfc2-rank10-tuned-seed{seed}.kfc"
    main(
        ["compress", "--in", baseline, "--layer", "fc1", "--formulation", "II"]
        + ["--k1", "64", "--k2", "4", "--rank", "10", "--out", compressed]
    )
    main(
        ["finetune", "--from", compressed, "--out", finetuned, "--data", data_dir]
        + ["--config", f"{ROOT}/configs/finetune-kfc2-rank10.cfg"]
        + ["--seed", str(seed)]
    )
    _, meta = load_checkpoint(finetuned)
    tuned.append({"seed": seed, "test_error": meta["test_error"]})

base_errors = df[df.method == "mnist-mlp-baseline"].set_index("seed").test_error
tuned_df = pd.DataFrame(tuned).set_index("seed")
tuned_df["gap_to_baseline"] = tuned_df.test_error - base_errors
print(tuned_df)
