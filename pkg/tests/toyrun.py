"""Small run configurations and CLI helpers shared by the training and CLI tests."""
from carflow.cli import main

TOY_NET = """n_input = 32
level_sizes = 8, 6, 4, 2
embedding_conv_sizes = 2, 1
widths = 6, 6, 6, 6
embedding_width = 6
refine_widths = 6, 6, 6
k_conv = 4
k_cost1 = 3
k_cost2 = 3
k_upconv = 3
fc_width = 4
"""


def toy_config_text(**run):
    extra = "".join(f"{k} = {v}\n" for k, v in run.items())
    return TOY_NET + extra


def write_config(path, **run):
    path.write_text(toy_config_text(**run), encoding="utf-8")
    return path


def gen(out, scenes=4, points=32, *extra):
    assert main(["gen-data", "--out", str(out), "--scenes", str(scenes), "--points", str(points), *extra]) == 0
    return out
