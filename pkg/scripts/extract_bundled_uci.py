"""Populate ``data/uci`` from datasets bundled inside PyPI wheels.

Boston Housing ships as a CSV in ``mlxtend`` and Concrete Compressive
Strength as a compressed pandas pickle in ``rdatasets``. The wheels are
fetched with ``pip download`` into a temporary directory and read as zip
archives; nothing is installed. The remaining UCI files have to be placed in
``data/uci`` by hand (see the manifest comments).

    python3 scripts/extract_bundled_uci.py [--out data/uci]
"""

from __future__ import annotations

import argparse
import glob
import io
import lzma
import pickle
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

MANIFEST = """\
# Dataset registry. Paths are relative to this file.
# delimiter: a single character, or "whitespace" for runs of blanks.
# target_columns: header names or 0-based positions (negative counts from the end).

[boston_housing]
path = boston_housing.csv
target_columns = -1
delimiter = ,
header = false

[concrete]
path = concrete.csv
target_columns = compressive_strength
delimiter = ,
header = true

# Energy efficiency (ENB2012): export the xlsx sheet to CSV with columns X1..X8,Y1,Y2.
[energy]
path = energy.csv
target_columns = Y1,Y2
delimiter = ,
header = true

# yacht_hydrodynamics.data as distributed: 7 whitespace separated columns, last is the target.
[yacht]
path = yacht_hydrodynamics.data
target_columns = -1
delimiter = whitespace
header = false

[carbon]
path = carbon_nanotubes.csv
target_columns = -3,-2,-1
delimiter = ;
header = true

[power_plant]
path = power_plant.csv
target_columns = PE
delimiter = ,
header = true

[kin8nm]
path = kin8nm.csv
target_columns = y
delimiter = ,
header = true

[naval]
path = naval_propulsion.txt
target_columns = -2,-1
delimiter = whitespace
header = false

[protein]
path = CASP.csv
target_columns = RMSD
delimiter = ,
header = true

[superconductivity]
path = superconductivity.csv
target_columns = critical_temp
delimiter = ,
header = true

[wine_red]
path = winequality-red.csv
target_columns = quality
delimiter = ;
header = true

[wine_white]
path = winequality-white.csv
target_columns = quality
delimiter = ;
header = true
"""


def _download(package: str, dest: str) -> zipfile.ZipFile:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary", ":all:", "-q", "-d", dest, package],
        check=True,
    )
    (wheel,) = glob.glob(f"{dest}/{package}-*.whl")
    return zipfile.ZipFile(wheel)


def extract_boston(wheel: zipfile.ZipFile, out: Path):
    text = wheel.read("mlxtend/data/data/boston_housing.csv").decode()
    (out / "boston_housing.csv").write_text(text)


def extract_concrete(wheel: zipfile.ZipFile, out: Path):
    frame = pickle.loads(lzma.decompress(wheel.read("rdatasets/_data/modeldata/concrete.pkl.compress")))
    frame = frame.drop(columns=[c for c in frame.columns if c == "rownames"])
    buf = io.StringIO()
    frame.to_csv(buf, index=False, lineterminator="\n")
    (out / "concrete.csv").write_text(buf.getvalue())


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "uci"))
    args = p.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        extract_boston(_download("mlxtend", tmp), out)
        extract_concrete(_download("rdatasets", tmp), out)
    manifest = out / "manifest.ini"
    if not manifest.exists():
        manifest.write_text(MANIFEST)
    print(f"wrote boston_housing.csv, concrete.csv and manifest.ini to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
