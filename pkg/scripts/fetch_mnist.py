# %%
import os

import requests
from tqdm import tqdm

from kron_fc import ROOT
from kron_fc.formats import MNIST_FILES, load_mnist


# %%
# mirror of yann.lecun.com/exdb/mnist
MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist"
data_dir = os.environ.get("KFC_MNIST_DIR", f"{ROOT}/data/mnist")
os.makedirs(data_dir, exist_ok=True)

for name in tqdm(MNIST_FILES.values(), desc="MNIST files"):
    path = f"{data_dir}/{name}.gz"
    if os.path.isfile(path) or os.path.isfile(f"{data_dir}/{name}"):
        continue
    response = requests.get(f"{MIRROR}/{name}.gz", timeout=60)
    response.raise_for_status()
    with open(path, "wb") as file:
        file.write(response.content)


# %% a truncated download raises ParseError here
train, val, test = load_mnist(data_dir)
print(f"{len(train)=}, {len(val)=}, {len(test)=}")
