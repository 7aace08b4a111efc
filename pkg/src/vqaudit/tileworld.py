"""
Deterministic top-down tile world with pixel-exact entity masks.

A frame is the tile grid rendered from 8x8 sprites with a one-tile HUD strip
underneath showing eight counters as digit glyphs. The default 7x8 world gives
64x64 frames.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import sprites as sp
from .errors import ConfigurationError, LoadError
from .rng import ALGORITHM, Xoshiro256, derive_seed

HUD_ITEMS = ("health", "food", "drink", "energy", "wood", "stone", "coal", "sapling")
INITIAL_HUD = (9, 9, 9, 9, 0, 0, 0, 0)

STAY, UP, DOWN, LEFT, RIGHT = range(5)
ACTION_NAMES = ("stay", "up", "down", "left", "right")
_MOVES = {STAY: (0, 0), UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}
BLOCKING = (sp.WATER, sp.STONE)

DEFAULT_ROWS, DEFAULT_COLS = 7, 8
DEFAULT_WEIGHTS = (0.45, 0.12, 0.12, 0.12, 0.12, 0.07)


@dataclass
class TileGrid:
    """Terrain ids (0-5) plus the single agent-spawn cell."""

    tiles: np.ndarray
    spawn: tuple

    @property
    def rows(self):
        return self.tiles.shape[0]

    @property
    def cols(self):
        return self.tiles.shape[1]

    def to_json(self):
        return {"tiles": self.tiles.tolist(), "spawn": list(self.spawn)}

    @classmethod
    def from_json(cls, obj):
        return cls(np.array(obj["tiles"], dtype=np.uint8), tuple(obj["spawn"]))


@dataclass
class Observation:
    frame: np.ndarray  # HxWx3 uint8
    mask: np.ndarray  # HxW uint8 entity ids
    hud: tuple = ()
    agent_pos: tuple | None = None


@dataclass
class EpisodeLog:
    episode: int
    grid: TileGrid
    actions: list
    observations: list  # len(actions) + 1
    seed: int | None = None

    @property
    def steps(self):
        """(observation, action, next observation) triples."""
        return [(self.observations[t], a, self.observations[t + 1]) for t, a in enumerate(self.actions)]

    def __len__(self):
        return len(self.actions)


@dataclass
class DatasetManifest:
    seed: int | None
    episodes: int
    steps_per_episode: object
    image_size: list
    palette_version: str = sp.PALETTE_VERSION
    prng: str = ALGORITHM
    transitions: int = 0
    files: dict = field(default_factory=dict)
    worlds: list = field(default_factory=list)

    def to_json(self):
        return {
            "seed": self.seed, "episodes": self.episodes, "steps_per_episode": self.steps_per_episode,
            "image_size": self.image_size, "palette_version": self.palette_version, "prng": self.prng,
            "transitions": self.transitions, "files": self.files, "worlds": self.worlds,
        }


def generate_world(seed, rows=DEFAULT_ROWS, cols=DEFAULT_COLS, tile_weights=DEFAULT_WEIGHTS):
    if rows < 1 or cols < 1:
        raise ConfigurationError(f"grid must have positive area, got {rows}x{cols}")
    weights = [float(w) for w in tile_weights]
    if len(weights) != len(sp.TERRAIN):
        raise ConfigurationError(f"expected {len(sp.TERRAIN)} tile weights, got {len(weights)}")
    if any(w < 0 for w in weights) or sum(weights) <= 0:
        raise ConfigurationError("tile weights must be nonnegative and not all zero")
    rng = Xoshiro256(seed)
    tiles = np.array([rng.weighted_index(weights) for _ in range(rows * cols)], dtype=np.uint8).reshape(rows, cols)
    passable = [i for i, t in enumerate(tiles.ravel()) if t not in BLOCKING]
    candidates = passable or list(range(rows * cols))
    idx = candidates[rng.randbelow(len(candidates))]
    return TileGrid(tiles, (idx // cols, idx % cols))


def render(grid: TileGrid, agent_pos=None, hud=None):
    """Compose the frame and mask. ``hud`` needs one counter per grid column."""
    t = sp.TILE
    rows, cols = grid.rows, grid.cols
    height = rows * t + (t if hud is not None else 0)
    frame = np.empty((height, cols * t, 3), dtype=np.uint8)
    mask = np.empty((height, cols * t), dtype=np.uint8)
    # world: (rows, cols, 8, 8, 3) -> (rows*8, cols*8, 3)
    frame[: rows * t] = sp.SPRITES[grid.tiles].transpose(0, 2, 1, 3, 4).reshape(rows * t, cols * t, 3)
    mask[: rows * t] = np.repeat(np.repeat(grid.tiles, t, axis=0), t, axis=1)
    if agent_pos is not None:
        r, c = agent_pos
        if not (0 <= r < rows and 0 <= c < cols):
            raise ConfigurationError(f"agent position {agent_pos} outside {rows}x{cols} grid")
        cell = (slice(r * t, (r + 1) * t), slice(c * t, (c + 1) * t))
        opaque = sp.ALPHA[sp.AGENT]
        frame[cell][opaque] = sp.SPRITES[sp.AGENT][opaque]
        mask[cell][opaque] = sp.AGENT
    if hud is not None:
        hud = tuple(int(v) for v in hud)
        if len(hud) != cols:
            raise ConfigurationError(f"HUD has {len(hud)} counters but the grid has {cols} columns")
        if any(not 0 <= v <= 9 for v in hud):
            raise ConfigurationError(f"HUD counters must be 0-9, got {hud}")
        for c, value in enumerate(hud):
            frame[rows * t:, c * t:(c + 1) * t] = sp.SPRITES[sp.DIGIT_BASE + value]
            mask[rows * t:, c * t:(c + 1) * t] = sp.DIGIT_BASE + value
    return Observation(frame, mask, hud if hud is not None else (), agent_pos)


def step_state(grid: TileGrid, pos, hud, action, t, grass_entries=0):
    """Pure transition. Returns (pos, hud, grass_entries)."""
    if action not in _MOVES:
        raise ConfigurationError(f"unknown action {action}")
    health, food, drink, energy, wood, stone, coal, sapling = hud
    dr, dc = _MOVES[action]
    r, c = pos[0] + dr, pos[1] + dc
    if action == STAY:
        energy += 1
    elif 0 <= r < grid.rows and 0 <= c < grid.cols:
        tile = grid.tiles[r, c]
        if tile == sp.WATER:
            drink += 1
        elif tile == sp.STONE:
            stone += 1
        else:
            pos = (r, c)
            if tile == sp.TREE:
                wood += 1
            elif tile == sp.COAL:
                coal += 1
            elif tile == sp.GRASS:
                grass_entries += 1
                if grass_entries % 4 == 0:
                    sapling += 1
    n = t + 1
    if n % 25 == 0:
        food -= 1
    if n % 20 == 0:
        drink -= 1
    if n % 30 == 0:
        energy -= 1
    if n % 10 == 0:
        health += -1 if min(food, drink, energy) <= 0 else 1
    hud = tuple(min(9, max(0, v)) for v in (health, food, drink, energy, wood, stone, coal, sapling))
    return pos, hud, grass_entries


def replay(grid: TileGrid, actions, hud=INITIAL_HUD):
    """Re-render an episode from its world and action list."""
    pos, entries = grid.spawn, 0
    observations = [render(grid, pos, hud)]
    for t, a in enumerate(actions):
        pos, hud, entries = step_state(grid, pos, hud, a, t, entries)
        observations.append(render(grid, pos, hud))
    return observations


def rollout(grid: TileGrid, seed, steps, policy="random-walk", actions=None, episode=0):
    """Random-walk episode. ``actions`` overrides the policy (for scripted tests)."""
    if steps < 1:
        raise ConfigurationError(f"steps must be >= 1, got {steps}")
    if actions is None:
        if policy != "random-walk":
            raise ConfigurationError(f"unknown policy {policy!r}")
        rng = Xoshiro256(seed)
        actions = [rng.randbelow(len(_MOVES)) for _ in range(steps)]
    else:
        actions = [int(a) for a in actions][:steps]
        if len(actions) < steps:
            raise ConfigurationError(f"got {len(actions)} scripted actions for {steps} steps")
    return EpisodeLog(episode, grid, actions, replay(grid, actions), seed)


def generate_episode(seed, episode, steps, rows=DEFAULT_ROWS, cols=DEFAULT_COLS, tile_weights=DEFAULT_WEIGHTS):
    grid = generate_world(derive_seed(seed, episode, 0), rows, cols, tile_weights)
    return rollout(grid, derive_seed(seed, episode, 1), steps, episode=episode)


def generate_episodes(seed, episodes, steps, **kwargs):
    return [generate_episode(seed, e, steps, **kwargs) for e in range(episodes)]


# --- dataset files -------------------------------------------------------

def _frame_name(e, t):
    return f"frames/ep{e}_t{t}.png"


def _mask_name(e, t):
    return f"masks/ep{e}_t{t}.png"


def _png_bytes_rgb(frame):
    import io
    buf = io.BytesIO()
    Image.fromarray(frame, "RGB").save(buf, format="PNG")
    return buf.getvalue()


def _png_bytes_mask(mask):
    import io
    img = Image.fromarray(mask, "L").convert("P")
    img.putpalette([v for rgb in sp.MASK_PALETTE for v in rgb] + [0] * (3 * (256 - sp.N_ENTITIES)))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def file_digest(data):
    return hashlib.sha256(data).hexdigest()


def write_dataset(episodes, out_dir, seed=None):
    if not episodes:
        raise ConfigurationError("cannot write a dataset with no episodes")
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    files = {}

    def put(rel, data):
        with open(os.path.join(out_dir, rel), "wb") as fh:
            fh.write(data)
        files[rel] = {"bytes": len(data), "sha256": file_digest(data)}

    lines = []
    worlds = []
    for ep in episodes:
        e = ep.episode
        for t, obs in enumerate(ep.observations):
            put(_frame_name(e, t), _png_bytes_rgb(obs.frame))
            put(_mask_name(e, t), _png_bytes_mask(obs.mask))
        for t, a in enumerate(ep.actions):
            o0, o1 = ep.observations[t], ep.observations[t + 1]
            lines.append(json.dumps({
                "episode": e, "step": t, "action": int(a),
                "frame": _frame_name(e, t), "next_frame": _frame_name(e, t + 1),
                "mask": _mask_name(e, t), "next_mask": _mask_name(e, t + 1),
                "pos": list(o0.agent_pos), "next_pos": list(o1.agent_pos),
                "hud": list(o0.hud), "next_hud": list(o1.hud),
            }, sort_keys=True))
        worlds.append({"episode": e, "seed": ep.seed, **ep.grid.to_json()})
    put("transitions.jsonl", ("\n".join(lines) + "\n").encode())

    lengths = sorted({len(ep) for ep in episodes})
    h, w = episodes[0].observations[0].mask.shape
    manifest = DatasetManifest(
        seed=seed, episodes=len(episodes),
        steps_per_episode=lengths[0] if len(lengths) == 1 else [len(ep) for ep in episodes],
        image_size=[h, w], transitions=len(lines), files=files, worlds=worlds,
    )
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest.to_json(), fh, indent=1, sort_keys=True)
    return manifest


def read_manifest(directory, verify=True):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise LoadError(f"{path}: missing dataset manifest") from None
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: unreadable manifest ({exc})") from None
    manifest = DatasetManifest(**raw)
    if verify:
        for rel in sorted(manifest.files):
            meta = manifest.files[rel]
            full = os.path.join(directory, rel)
            if not os.path.isfile(full):
                raise LoadError(f"{rel}: listed in manifest but missing")
            if os.path.getsize(full) != meta["bytes"]:
                raise LoadError(f"{rel}: size {os.path.getsize(full)} != manifest {meta['bytes']}")
            with open(full, "rb") as fh:
                if file_digest(fh.read()) != meta["sha256"]:
                    raise LoadError(f"{rel}: checksum mismatch")
    return manifest


def _read_png(path):
    with Image.open(path) as img:
        return np.array(img)


def read_dataset(directory, verify=True):
    manifest = read_manifest(directory, verify=verify)
    tpath = os.path.join(directory, "transitions.jsonl")
    by_episode = {}
    with open(tpath) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                raise LoadError(f"transitions.jsonl: malformed record on line {lineno}") from None
            by_episode.setdefault(rec["episode"], []).append(rec)

    episodes = []
    for world in manifest.worlds:
        e = world["episode"]
        recs = sorted(by_episode.get(e, []), key=lambda r: r["step"])
        if not recs:
            raise LoadError(f"transitions.jsonl: no transitions for episode {e}")
        observations = []
        for i, rec in enumerate(recs):
            if rec["step"] != i:
                raise LoadError(f"transitions.jsonl: episode {e} step {i} missing")
            if i == 0:
                observations.append(_load_obs(directory, rec["frame"], rec["mask"], rec["hud"], rec["pos"]))
            observations.append(_load_obs(directory, rec["next_frame"], rec["next_mask"], rec["next_hud"], rec["next_pos"]))
        episodes.append(EpisodeLog(e, TileGrid.from_json(world), [r["action"] for r in recs], observations, world.get("seed")))
    if not episodes:
        raise LoadError(f"{directory}: dataset has no episodes")
    return episodes


def _load_obs(directory, frame_rel, mask_rel, hud, pos):
    try:
        frame = _read_png(os.path.join(directory, frame_rel))
        mask = _read_png(os.path.join(directory, mask_rel))
    except (OSError, ValueError) as exc:
        raise LoadError(f"{frame_rel}: cannot decode ({exc})") from None
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise LoadError(f"{frame_rel}: expected an RGB frame, got shape {frame.shape}")
    if mask.shape != frame.shape[:2]:
        raise LoadError(f"{mask_rel}: mask shape {mask.shape} does not match frame {frame.shape[:2]}")
    return Observation(frame, mask.astype(np.uint8), tuple(hud), tuple(pos))


def dataset_digest(directory):
    """Checksum of the manifest, which itself pins every file by sha256."""
    with open(os.path.join(directory, "manifest.json"), "rb") as fh:
        return file_digest(fh.read())
