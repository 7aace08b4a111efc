"""8x8 sprite table for the tile world.

Entity ids double as mask values and ground-truth labels:
0-5 terrain, 6 agent, 7-16 HUD digits 0-9.
"""
from __future__ import annotations

import numpy as np

PALETTE_VERSION = "tiles-v1"
TILE = 8

GRASS, WATER, STONE, TREE, SAND, COAL, AGENT = range(7)
DIGIT_BASE = 7
TERRAIN = (GRASS, WATER, STONE, TREE, SAND, COAL)
ENTITY_NAMES = ["grass", "water", "stone", "tree", "sand", "coal", "agent"] + [f"digit{d}" for d in range(10)]
N_ENTITIES = len(ENTITY_NAMES)

_COLORS = {
    "G": (86, 170, 60), "g": (58, 128, 42),
    "B": (40, 90, 200), "b": (110, 160, 235),
    "S": (125, 125, 125), "s": (88, 88, 88), "l": (170, 170, 170),
    "T": (30, 95, 35), "t": (50, 125, 50), "r": (110, 70, 30),
    "Y": (222, 200, 124), "y": (196, 172, 92),
    "k": (20, 20, 20),
    "A": (150, 60, 170), "a": (250, 215, 170), "e": (10, 10, 60), "c": (230, 60, 60),
    "H": (32, 32, 32), "W": (240, 240, 240),
}

_PATTERNS = {
    GRASS: ["GGGGGGGG", "GgGGGGgG", "GGGGgGGG", "GGgGGGGG", "GGGGGGgG", "GgGGGGGG", "GGGGgGGG", "GGGGGGGG"],
    WATER: ["BBBBBBBB", "BbbBBBBB", "BBBBBbbB", "BBBBBBBB", "BBbbBBBB", "BBBBBBbb", "bBBBBBBB", "BBBBbbBB"],
    STONE: ["SSSSSSSl", "SsSSSSSS", "SSSSlSSS", "SSSsSSSS", "lSSSSSsS", "SSSSSSSS", "SSsSSlSS", "SSSSSSSS"],
    TREE:  ["GGTTTTGG", "GTTtTTTG", "TTtTTtTT", "TTTTtTTT", "GTTtTTTG", "GGTTTTGG", "GGGrrGGG", "GGGrrGGG"],
    SAND:  ["YYYYYYYY", "YYyYYYYY", "YYYYYYyY", "YYYYYYYY", "YyYYYYYY", "YYYYyYYY", "YYYYYYYY", "yYYYYYyY"],
    COAL:  ["SSSSSSSS", "SkkSSSSS", "SkkSSkSS", "SSSSkkkS", "SSSSSkSS", "SkSSSSSS", "kkSSSkkS", "SSSSSkSS"],
    AGENT: ["AAaaaaAA", "AAaeaeAA", "AAaaaaAA", "AccccccA", "AcAccAcA", "AAccccAA", "AAcAAcAA", "AAcAAcAA"],
}

# 3x5 font, drawn at rows 1-5, cols 2-4 of the HUD cell
_FONT = {
    0: ["###", "#.#", "#.#", "#.#", "###"],
    1: [".#.", "##.", ".#.", ".#.", "###"],
    2: ["###", "..#", "###", "#..", "###"],
    3: ["###", "..#", "###", "..#", "###"],
    4: ["#.#", "#.#", "###", "..#", "..#"],
    5: ["###", "#..", "###", "..#", "###"],
    6: ["###", "#..", "###", "#.#", "###"],
    7: ["###", "..#", ".#.", ".#.", ".#."],
    8: ["###", "#.#", "###", "#.#", "###"],
    9: ["###", "#.#", "###", "..#", "###"],
}


def _from_pattern(rows):
    return np.array([[_COLORS[ch] for ch in row] for row in rows], dtype=np.uint8)


def _digit_sprite(d):
    img = np.empty((TILE, TILE, 3), dtype=np.uint8)
    img[:] = _COLORS["H"]
    for r, row in enumerate(_FONT[d]):
        for c, ch in enumerate(row):
            if ch == "#":
                img[1 + r, 2 + c] = _COLORS["W"]
    # a short underline keeps every glyph distinct from the others at any crop
    img[7, 1:7] = (60 + 15 * d, 60, 60)
    return img


def build_sprite_table():
    """(N_ENTITIES, 8, 8, 3) uint8 sprites and matching (N_ENTITIES, 8, 8) alpha."""
    sprites = np.zeros((N_ENTITIES, TILE, TILE, 3), dtype=np.uint8)
    for eid, pattern in _PATTERNS.items():
        sprites[eid] = _from_pattern(pattern)
    for d in range(10):
        sprites[DIGIT_BASE + d] = _digit_sprite(d)
    # the agent is drawn on its own backdrop, so it covers its whole cell
    alpha = np.ones((N_ENTITIES, TILE, TILE), dtype=bool)
    return sprites, alpha


SPRITES, ALPHA = build_sprite_table()

# display colors for palette-indexed mask PNGs
MASK_PALETTE = [tuple(int(v) for v in SPRITES[i].reshape(-1, 3).mean(axis=0)) for i in range(N_ENTITIES)]
