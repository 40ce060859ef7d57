"""
Paired audio/image dataset construction.

Speech-command clips are paired with traffic-sign crops of the same command
(normal pairs) and with signs of a different command (anomaly pairs, the
signature of an injected voice command that the camera view contradicts).
"""

import hashlib
import json
import logging
import math
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image

from .audio import FEATURE_DIM, AudioClip, AudioFeatures, load_wav, mfcc_features
from .errors import DatasetError, FormatError, SplitError
from .labels import COMMANDS, Target

log = logging.getLogger(__name__)

IMAGE_SIZE = 64
IMAGES_PER_CLASS = 300
IMAGE_SUFFIXES = (".ppm", ".png", ".jpg", ".jpeg")

# GTSRB class ids of the signs whose meaning matches each spoken command.
DEFAULT_CLASS_MAP: dict[int, Target] = {
    35: Target.GO,  # ahead only
    33: Target.RIGHT,  # turn right ahead
    34: Target.LEFT,  # turn left ahead
    14: Target.STOP,  # stop
}

SPEECH_COMMANDS_HELP = (
    "Download Speech Commands v0.01 from "
    "http://download.tensorflow.org/data/speech_commands_v0.01.tar.gz and extract it so that "
    "<root>/go, <root>/right, <root>/left and <root>/stop hold the .wav files."
)
GTSRB_HELP = (
    "Download GTSRB_Final_Training_Images.zip from https://benchmark.ini.rub.de/gtsrb_dataset.html and extract it; "
    "point the GTSRB root at the directory holding the 5-digit class folders (Final_Training/Images)."
)


@dataclass(frozen=True, eq=False)
class ImageSample:
    pixels: np.ndarray
    command: Target
    source_id: str

    def __post_init__(self) -> None:
        if self.pixels.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise DatasetError(f"{self.source_id}: image shape {self.pixels.shape}, expected {(IMAGE_SIZE, IMAGE_SIZE, 3)}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DatasetError(f"{self.source_id}: pixel values outside [0, 1]")
        if self.command not in COMMANDS:
            raise DatasetError(f"{self.source_id}: {self.command!r} is not a sign class")


@dataclass(frozen=True, eq=False)
class LabeledPair:
    audio: AudioFeatures
    image: ImageSample
    audio_class: Target
    target: Target

    def __post_init__(self) -> None:
        if self.target is Target.ANOMALY:
            if self.image.command == self.audio_class:
                raise DatasetError(f"Anomaly pair {self.audio.clip_id} / {self.image.source_id} has matching classes")
        elif not self.image.command == self.audio_class == self.target:
            raise DatasetError(
                f"Normal pair {self.audio.clip_id} / {self.image.source_id} mixes "
                f"{self.audio_class.word}, {self.image.command.word} and target {self.target.word}"
            )

    @property
    def features(self) -> np.ndarray:
        return self.audio.values


@dataclass(frozen=True, eq=False)
class PairedDataset:
    pairs: tuple[LabeledPair, ...]
    seed: int
    anomaly_fraction: float

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def class_counts(self) -> dict[Target, int]:
        counts = Counter(pair.target for pair in self.pairs)
        return {target: counts.get(target, 0) for target in Target}

    @cached_property
    def targets(self) -> np.ndarray:
        return np.array([int(pair.target) for pair in self.pairs], dtype=np.int64)

    def arrays(
        self, indices: Sequence[int] | np.ndarray | None = None, dtype=np.float32
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked ``(images N×64×64×3, audio N×1000, targets N)`` for the selected pairs."""
        selected = range(len(self.pairs)) if indices is None else indices
        pairs = [self.pairs[i] for i in selected]
        if not pairs:
            return np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3), dtype), np.zeros((0, FEATURE_DIM), dtype), np.zeros(0, np.int64)
        images = np.stack([p.image.pixels for p in pairs]).astype(dtype)
        audio = np.stack([p.features for p in pairs]).astype(dtype)
        targets = np.array([int(p.target) for p in pairs], dtype=np.int64)
        return images, audio, targets


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold_of: np.ndarray
    k: int

    def validation_indices(self, fold: int) -> np.ndarray:
        self._check_fold(fold)
        return np.flatnonzero(self.fold_of == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        self._check_fold(fold)
        return np.flatnonzero(self.fold_of != fold)

    def fold_sizes(self) -> list[int]:
        return np.bincount(self.fold_of, minlength=self.k).tolist()

    def _check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.k:
            raise SplitError(f"Fold {fold} out of range for k={self.k}")


def _to_pixels(image: Image.Image) -> np.ndarray:
    resized = image.convert("RGB").resize((IMAGE_SIZE, IMAGE_SIZE), Image.Resampling.BILINEAR)
    return np.asarray(resized, dtype=np.float32) / 255.0


def read_image(path: Path) -> np.ndarray:
    """One image file as 64×64×3 pixels in [0, 1]."""
    try:
        with Image.open(path) as image:
            return _to_pixels(image)
    except OSError as e:
        raise FormatError(f"{path}: unreadable image: {e}") from e


def _class_dir(root: Path, class_id: int) -> Path:
    images = root / "Final_Training" / "Images"
    base = images if images.is_dir() else root
    for candidate in (base / f"{class_id:05d}", base / str(class_id)):
        if candidate.is_dir():
            return candidate
    raise DatasetError(f"GTSRB class {class_id} not found under {base}. {GTSRB_HELP}")


def _annotations(class_dir: Path) -> pd.DataFrame | None:
    csvs = sorted(class_dir.glob("GT-*.csv"))
    if not csvs:
        return None
    table = pd.read_csv(csvs[0], sep=";")
    return table.set_index("Filename")


def load_sign_images(
    root: Path,
    class_map: Mapping[int, Target] = DEFAULT_CLASS_MAP,
    per_class: int = IMAGES_PER_CLASS,
) -> list[ImageSample]:
    """
    Decode the first ``per_class`` readable images of every mapped GTSRB class.

    Images are taken in sorted source-id order, cropped to the annotated ROI
    when a ``GT-*.csv`` annotation is present, resized bilinearly to 64×64 and
    scaled to [0, 1].
    """
    samples: list[ImageSample] = []
    for class_id, command in sorted(class_map.items()):
        class_dir = _class_dir(Path(root), class_id)
        annotations = _annotations(class_dir)
        files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)

        kept = 0
        for path in files:
            if kept == per_class:
                break
            try:
                with Image.open(path) as image:
                    sign = image
                    if annotations is not None and path.name in annotations.index:
                        roi = annotations.loc[path.name]
                        # Roi.X2 and Roi.Y2 are inclusive.
                        x1, y1, x2, y2 = (int(roi[k]) for k in ("Roi.X1", "Roi.Y1", "Roi.X2", "Roi.Y2"))
                        sign = image.crop((x1, y1, x2 + 1, y2 + 1))
                    pixels = _to_pixels(sign)
            except OSError as e:
                log.warning("Skipping unreadable image %s: %s", path, e)
                continue
            samples.append(ImageSample(pixels=pixels, command=command, source_id=f"{class_dir.name}/{path.name}"))
            kept += 1

        if kept < per_class:
            raise DatasetError(f"GTSRB class {class_id} ({command.word}) has only {kept} readable images, {per_class} required")
        log.info("Loaded %d %r sign images from %s", kept, command.word, class_dir)
    return samples


def load_speech_commands(
    root: Path,
    words: Sequence[Target] = COMMANDS,
    limit_per_class: int | None = None,
) -> list[AudioClip]:
    """Read ``<root>/<word>/*.wav`` for each command word, in sorted file order."""
    clips: list[AudioClip] = []
    for word in words:
        word_dir = Path(root) / word.word
        if not word_dir.is_dir():
            raise DatasetError(f"Speech Commands folder {word_dir} is missing. {SPEECH_COMMANDS_HELP}")
        paths = sorted(word_dir.glob("*.wav"))
        if limit_per_class is not None:
            paths = paths[:limit_per_class]
        clips.extend(load_wav(path, label=word.word) for path in paths)
        log.info("Loaded %d %r clips from %s", len(paths), word.word, word_dir)
    return clips


def check_speech_corpus(root: Path) -> None:
    missing = [word.word for word in COMMANDS if not (Path(root) / word.word).is_dir()]
    if missing:
        raise DatasetError(f"Speech Commands root {root} lacks folders {missing}. {SPEECH_COMMANDS_HELP}")


def check_gtsrb_corpus(root: Path, class_map: Mapping[int, Target] = DEFAULT_CLASS_MAP) -> None:
    for class_id in class_map:
        _class_dir(Path(root), class_id)


def _as_features(item: AudioClip | AudioFeatures, index: int) -> AudioFeatures:
    if isinstance(item, AudioFeatures):
        return item
    name = item.source if item.source is not None else f"clip-{index:06d}"
    return AudioFeatures(clip_id=name, label=item.label, source=item.source, values=mfcc_features(item))


def _audio_class(audio: AudioFeatures) -> Target:
    if audio.label is None:
        raise DatasetError(f"Clip {audio.clip_id} has no command label")
    try:
        command = Target.from_word(audio.label)
    except ValueError as e:
        raise DatasetError(f"Clip {audio.clip_id}: {e}") from e
    if command not in COMMANDS:
        raise DatasetError(f"Clip {audio.clip_id}: {command.word!r} is not a command class")
    return command


def _group_images(images: Sequence[ImageSample] | Mapping[Target, Sequence[ImageSample]]) -> dict[Target, list[ImageSample]]:
    if isinstance(images, Mapping):
        return {command: list(images.get(command, ())) for command in COMMANDS}
    grouped: dict[Target, list[ImageSample]] = {command: [] for command in COMMANDS}
    for image in images:
        grouped[image.command].append(image)
    return grouped


def generate_mismatch(
    clip: AudioClip | AudioFeatures,
    images: Sequence[ImageSample] | Mapping[Target, Sequence[ImageSample]],
    rng: np.random.Generator,
) -> LabeledPair:
    """Pair ``clip`` with a sign of a uniformly drawn *other* command class."""
    audio = _as_features(clip, 0)
    command = _audio_class(audio)
    grouped = _group_images(images)
    others = [c for c in COMMANDS if c != command and grouped[c]]
    if not others:
        raise DatasetError(f"No sign image of a class other than {command.word!r} to pair with {audio.clip_id}")
    pool = grouped[others[rng.integers(len(others))]]
    image = pool[rng.integers(len(pool))]
    return LabeledPair(audio=audio, image=image, audio_class=command, target=Target.ANOMALY)


def build_aid(
    audio: Sequence[AudioClip | AudioFeatures],
    images: Sequence[ImageSample],
    anomaly_fraction: float = 0.5,
    seed: int = 0,
) -> PairedDataset:
    """
    Build the paired dataset.

    Every clip gets one matched pair with a uniformly drawn sign of its own
    class; ``ceil(anomaly_fraction * n_matched)`` anomaly pairs are added for
    uniformly drawn clips, and the combined list is shuffled. The same inputs
    and seed always give the same pairs in the same order.
    """
    if not 0.0 < anomaly_fraction < 1.0:
        raise DatasetError(f"anomaly_fraction must be in (0, 1), got {anomaly_fraction}")

    rng = np.random.default_rng(seed)
    rows = [_as_features(item, i) for i, item in enumerate(audio)]
    grouped = _group_images(images)
    clip_counts = Counter(_audio_class(row) for row in rows)
    for command in COMMANDS:
        if not clip_counts[command]:
            raise DatasetError(f"No {command.word!r} clips to pair")
        if not grouped[command]:
            raise DatasetError(f"No {command.word!r} sign images to pair")

    pairs: list[LabeledPair] = []
    for row in rows:
        command = _audio_class(row)
        pool = grouped[command]
        pairs.append(LabeledPair(audio=row, image=pool[rng.integers(len(pool))], audio_class=command, target=command))

    # round() guards against products like 0.07 * 100 landing just above an integer
    n_anomaly = math.ceil(round(anomaly_fraction * len(pairs), 9))
    for _ in range(n_anomaly):
        pairs.append(generate_mismatch(rows[rng.integers(len(rows))], grouped, rng))

    order = rng.permutation(len(pairs))
    dataset = PairedDataset(pairs=tuple(pairs[i] for i in order), seed=seed, anomaly_fraction=anomaly_fraction)
    log.info("Built paired dataset: %s", {t.word: n for t, n in dataset.class_counts.items()})
    return dataset


def split_folds(dataset: PairedDataset, k: int = 5, seed: int = 0) -> FoldAssignment:
    """
    Stratified k-fold assignment.

    Each target class is shuffled and dealt round-robin; the dealing position
    carries over from one class to the next so overall fold sizes also differ
    by at most one.
    """
    if k < 2:
        raise SplitError(f"k must be at least 2, got {k}")
    targets = dataset.targets
    rng = np.random.default_rng(seed)
    fold_of = np.full(len(targets), -1, dtype=np.int64)

    position = 0
    for target in Target:
        members = np.flatnonzero(targets == target)
        if members.size == 0:
            continue
        if members.size < k:
            raise SplitError(f"Class {target.word!r} has {members.size} pairs, fewer than k={k}")
        members = rng.permutation(members)
        fold_of[members] = (position + np.arange(members.size)) % k
        position = (position + members.size) % k

    return FoldAssignment(fold_of=fold_of, k=k)


def _audio_key(pair: LabeledPair) -> str:
    return pair.audio.source or pair.audio.clip_id


def dataset_digest(dataset: PairedDataset) -> str:
    """SHA-256 over ids, labels, features and pixels of every pair, in order."""
    digest = hashlib.sha256()
    digest.update(f"seed={dataset.seed};n={len(dataset)}".encode())
    for pair in dataset.pairs:
        digest.update(f"{_audio_key(pair)}|{pair.image.source_id}|{int(pair.audio_class)}|{int(pair.target)}".encode())
        digest.update(np.ascontiguousarray(pair.features, dtype=np.float64).tobytes())
        digest.update(np.ascontiguousarray(pair.image.pixels, dtype=np.float32).tobytes())
    return digest.hexdigest()


PAIRS_CSV = "pairs.csv"
IMAGES_CSV = "images.csv"
AUDIO_NPY = "audio.npy"
IMAGES_NPY = "images.npy"
DATASET_JSON = "dataset.json"


def save_dataset(dataset: PairedDataset, directory: Path, folds: FoldAssignment | None = None) -> list[Path]:
    """
    Persist ``dataset`` so that equal datasets produce byte-identical files.

    Unique sign images are stored once as uint8 in ``images.npy`` (indexed by
    ``images.csv``); ``pairs.csv`` is the pair manifest.
    """
    directory.mkdir(parents=True, exist_ok=True)

    image_index: dict[str, int] = {}
    unique: list[ImageSample] = []
    for pair in dataset.pairs:
        if pair.image.source_id not in image_index:
            image_index[pair.image.source_id] = len(unique)
            unique.append(pair.image)

    pixels = np.stack([np.rint(image.pixels * 255.0).astype(np.uint8) for image in unique])
    np.save(directory / IMAGES_NPY, pixels)
    np.save(directory / AUDIO_NPY, np.stack([pair.features for pair in dataset.pairs]).astype(np.float64))
    pd.DataFrame(
        {"image_id": [image.source_id for image in unique], "image_class": [image.command.word for image in unique]}
    ).to_csv(directory / IMAGES_CSV, index=False)
    pd.DataFrame(
        {
            "pair_id": range(len(dataset)),
            "audio_path": [_audio_key(pair) for pair in dataset.pairs],
            "image_id": [pair.image.source_id for pair in dataset.pairs],
            "audio_class": [pair.audio_class.word for pair in dataset.pairs],
            "image_class": [pair.image.command.word for pair in dataset.pairs],
            "target": [pair.target.word for pair in dataset.pairs],
            "fold": folds.fold_of if folds is not None else -1,
        }
    ).to_csv(directory / PAIRS_CSV, index=False)
    meta = {
        "seed": dataset.seed,
        "anomaly_fraction": dataset.anomaly_fraction,
        "k": folds.k if folds is not None else None,
        "digest": dataset_digest(dataset),
        "class_counts": {t.word: n for t, n in dataset.class_counts.items()},
    }
    (directory / DATASET_JSON).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return [directory / name for name in (IMAGES_NPY, AUDIO_NPY, IMAGES_CSV, PAIRS_CSV, DATASET_JSON)]


def load_dataset(directory: Path) -> tuple[PairedDataset, FoldAssignment | None]:
    meta_path = directory / DATASET_JSON
    if not meta_path.exists():
        raise DatasetError(f"No paired dataset in {directory}; run `avguard build-dataset` first")
    meta = json.loads(meta_path.read_text())

    images_table = pd.read_csv(directory / IMAGES_CSV, dtype=str)
    pixels = np.load(directory / IMAGES_NPY)
    images = {
        row.image_id: ImageSample(
            pixels=pixels[i].astype(np.float32) / 255.0, command=Target.from_word(row.image_class), source_id=row.image_id
        )
        for i, row in enumerate(images_table.itertuples(index=False))
    }

    audio = np.load(directory / AUDIO_NPY)
    table = pd.read_csv(directory / PAIRS_CSV, dtype={"audio_path": str, "image_id": str})
    pairs = tuple(
        LabeledPair(
            audio=AudioFeatures(clip_id=row.audio_path, label=row.audio_class, source=row.audio_path, values=audio[i]),
            image=images[row.image_id],
            audio_class=Target.from_word(row.audio_class),
            target=Target.from_word(row.target),
        )
        for i, row in enumerate(table.itertuples(index=False))
    )
    dataset = PairedDataset(pairs=pairs, seed=int(meta["seed"]), anomaly_fraction=float(meta["anomaly_fraction"]))

    folds = None
    if meta.get("k") is not None:
        folds = FoldAssignment(fold_of=table["fold"].to_numpy(dtype=np.int64), k=int(meta["k"]))
    if dataset_digest(dataset) != meta["digest"]:
        raise DatasetError(f"Dataset in {directory} does not match its recorded digest")
    return dataset, folds


def subset_indices(dataset: PairedDataset, indices: Sequence[int] | np.ndarray, kind: str) -> np.ndarray:
    """Restrict ``indices`` to normal (matched), attack (anomaly) or mixed pairs."""
    indices = np.asarray(indices, dtype=np.int64)
    targets = dataset.targets[indices]
    match kind:
        case "normal":
            return indices[targets != Target.ANOMALY]
        case "attack":
            return indices[targets == Target.ANOMALY]
        case "mixed":
            return indices
        case _:
            raise ValueError(f"Unknown evaluation set {kind!r}; expected normal, attack or mixed")
