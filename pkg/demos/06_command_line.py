# Driving the command line from Python
#
# The same workflow through the `dbnsem` entry point: save a generator,
# sample CSV data, run discovery and evaluate a saved model.  Every command
# returns an exit code; all files are written atomically.

# %%
import tempfile
from pathlib import Path

from dbnsem.cli import main
from dbnsem.discover import hidden_persistence_dbn
from dbnsem.io import save_model

work = Path(tempfile.mkdtemp(prefix="dbnsem-demo-"))
save_model(hidden_persistence_dbn(), work / "gold.json")

# %%
main(["generate", "--model", str(work / "gold.json"), "--out", str(work / "train.csv"),
      "--num-sequences", "8", "--length", "400", "--seed", "1"])
main(["generate", "--model", str(work / "gold.json"), "--out", str(work / "test.csv"),
      "--num-sequences", "4", "--length", "400", "--seed", "2"])
print((work / "train.csv").read_text().splitlines()[:4])

# %%
main(["discover", "--data", str(work / "train.csv"), "--test-data", str(work / "test.csv"),
      "--out", str(work / "run"), "--iterations", "1", "--seed", "7"])
print(sorted(p.name for p in (work / "run").iterdir()))
main(["eval", "--model", str(work / "run" / "model_iter0.json"), "--data", str(work / "test.csv")])
