# %%
import os

import pandas as pd

from kron_fc import ROOT
from kron_fc.accounting import chinese_table, mnist_table, svhn_table
from kron_fc.formats import emit_report


os.makedirs(f"{ROOT}/data", exist_ok=True)


# %% parameter columns of the published MNIST and SVHN comparisons, recomputed
for name, rows in [("mnist", mnist_table()), ("svhn", svhn_table())]:
    print(f"\n{name}\n{emit_report(rows)}")
    with open(f"{ROOT}/data/{name}-params.tsv", "w") as file:
        file.write(emit_report(rows, fmt="tsv"))


# %% fc1 + fc2 of the character recognizer under each factorization
chinese = chinese_table()
print(chinese.to_string(index=False))
chinese.to_csv(f"{ROOT}/data/chinese-params.tsv", sep="\t", index=False)


# %% reductions only, to compare against the published percentages at a glance
df = pd.read_csv(f"{ROOT}/data/mnist-params.tsv", sep="\t", index_col="method")
print(df[["layer_reduction", "model_reduction"]])
