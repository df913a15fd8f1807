"""External data, e.g. written by `usfan-utils export-data config/toy_strong.py data/`."""

experiment = "csv_example"
source_csv = "data/source.csv"
target_csv = "data/target.csv"

hidden_dims = (32, 16)
