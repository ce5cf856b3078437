#!/usr/bin/env python3
"""Materialise MovieLens-100K as the tab-separated files the agnn CLI reads.

Sources, in order of preference:
  --grouplens DIR   an unpacked ml-100k directory (u.data, u.user, u.item)
  otherwise         the copy bundled with the RecBole wheel, fetched with pip

Output (in --out, default data/ml-100k):
  ratings.tsv   user, item, rating, timestamp (no header)
  users.tsv     user_id, age, gender, occupation, zip_code (header)
  items.tsv     item_id, title, genres (header; genres joined with '|')
"""

import argparse
import pathlib
import subprocess
import sys
import tempfile
import zipfile

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Thriller", "War", "Western",
]


def from_grouplens(src: pathlib.Path):
    ratings = [line.split("\t")[:4] for line in src.joinpath("u.data").read_text().splitlines() if line]
    users = [line.split("|")[:5] for line in src.joinpath("u.user").read_text().splitlines() if line]
    items = []
    for line in src.joinpath("u.item").read_text(encoding="latin-1").splitlines():
        if not line:
            continue
        cols = line.split("|")
        flags = cols[5:24]
        genres = [g for g, f in zip(GENRES, flags) if f == "1"]
        items.append([cols[0], cols[1], "|".join(genres)])
    return ratings, users, items


def from_recbole():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--quiet", "-d", tmp, "recbole==1.2.1"],
                       check=True)
        wheel = next(pathlib.Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as z:
            def table(ext):
                text = z.read(f"recbole/dataset_example/ml-100k/ml-100k.{ext}").decode("utf-8")
                rows = [line.split("\t") for line in text.splitlines() if line]
                return rows[1:]  # drop the typed header
            inter, user, item = table("inter"), table("user"), table("item")
    ratings = [r[:4] for r in inter]
    users = [[u[0], u[1], u[2], u[3], u[4]] for u in user]
    # RecBole keeps genres space-separated; none of the 19 names contains a space.
    items = [[i[0], i[1], "|".join(i[3].split())] for i in item]
    return ratings, users, items


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="data/ml-100k")
    ap.add_argument("--grouplens", type=pathlib.Path)
    args = ap.parse_args()

    ratings, users, items = from_grouplens(args.grouplens) if args.grouplens else from_recbole()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    out.joinpath("ratings.tsv").write_text("".join("\t".join(r) + "\n" for r in ratings))
    out.joinpath("users.tsv").write_text(
        "user_id\tage\tgender\toccupation\tzip_code\n" + "".join("\t".join(u) + "\n" for u in users))
    out.joinpath("items.tsv").write_text(
        "item_id\ttitle\tgenres\n" + "".join("\t".join(i) + "\n" for i in items))
    print(f"wrote {len(ratings)} ratings, {len(users)} users, {len(items)} items to {out}")


if __name__ == "__main__":
    main()
