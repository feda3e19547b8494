import logging
import os
import pickle

import pandas as pd
import yaml


def write_to_file(contents, filename):
    """
    It takes in a variable called contents and a variable called filename, and
    then writes the contents to a pickle file with the name filename.

    contents: anything picklable, usually a RunReport
    filename (str): destination path, parent directories are created
    """
    directory = os.path.dirname(filename)
    if directory:
        os.makedirs(directory, exist_ok=True)

    # write contents to pickle file
    with open(filename, "wb") as handle:
        pickle.dump(contents, handle)


def read_from_file(filename):
    """
    It loads the file from pickle.

    filename (str): path written by write_to_file
    """
    with open(filename, "rb") as handle:
        return pickle.load(handle)


def _read_lines(path):
    with open(path) as handle:
        for number, line in enumerate(handle, 1):
            line = line.strip()
            if line and not line.startswith("#"):
                yield number, line


def read_id_file(path):
    """
    Reads an identifier list, one integer per line.

    path (str): path of the ID-list file
    """
    ids = []
    for number, line in _read_lines(path):
        try:
            ids.append(int(line))
        except ValueError:
            raise ValueError(f"{path}:{number}: expected an integer identifier, got {line!r}")
    return ids


def read_layout_file(path):
    """
    Reads fixed (id, group) pairs, one "id,group" per line.

    path (str): path of the layout file
    """
    layout = []
    for number, line in _read_lines(path):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise ValueError(f"{path}:{number}: expected 'id,group', got {line!r}")
        try:
            layout.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise ValueError(f"{path}:{number}: expected integers, got {line!r}")
    return layout


def load_experiment(name, directory="experiments"):
    """
    Loads an experiment yml in the {key: {value, desc}} layout and returns
    a flat {key: value} dict.

    name (str): experiment name, or a path to a yml file
    directory (str): where named experiments live
    """
    path = name if name.endswith((".yml", ".yaml")) else os.path.join(directory, f"{name}.yml")
    if not os.path.exists(path):
        raise ValueError(f"Experiment file not found: {path}")

    with open(path) as handle:
        raw = yaml.safe_load(handle) or {}

    config = {}
    for key, entry in raw.items():
        config[key] = entry["value"] if isinstance(entry, dict) and "value" in entry else entry
    return config


def save_experiment(values, path, descriptions=None):
    """Writes a flat dict back to the {key: {value, desc}} layout."""
    descriptions = descriptions or {}
    raw = {key: {"value": value, "desc": descriptions.get(key, "")} for key, value in values.items()}
    with open(path, "w") as handle:
        yaml.safe_dump(raw, handle, sort_keys=False)


class CsvSink:
    """Append-only CSV file with a fixed header written exactly once."""

    def __init__(self, path, columns):
        self.path = path
        self.columns = list(columns)

        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)

        if os.path.exists(path) and os.path.getsize(path) > 0:
            existing = list(pd.read_csv(path, nrows=0).columns)
            if existing != self.columns:
                raise ValueError(f"{path} has columns {existing}, expected {self.columns}")
        else:
            pd.DataFrame(columns=self.columns).to_csv(path, index=False)
            logging.debug(f"Created {path}")

    def append(self, rows):
        if isinstance(rows, dict):
            rows = [rows]
        if not rows:
            return
        frame = pd.DataFrame(rows)
        missing = [c for c in self.columns if c not in frame.columns]
        if missing:
            raise ValueError(f"Rows are missing columns {missing}")
        frame[self.columns].to_csv(self.path, mode="a", header=False, index=False)

    def read(self):
        return pd.read_csv(self.path)
