import numpy as np
import pandas as pd
from PIL import Image
from scipy.io import wavfile

from avguard.audio import SAMPLE_RATE, AudioFeatures
from avguard.dataset import DEFAULT_CLASS_MAP, ImageSample, PairedDataset, build_aid
from avguard.labels import COMMANDS, Target
from avguard.models import Architecture, ModelSpec

TONES = {Target.GO: 300.0, Target.RIGHT: 700.0, Target.LEFT: 1500.0, Target.STOP: 3100.0}
COLORS = {Target.GO: (40, 160, 220), Target.RIGHT: (220, 40, 40), Target.LEFT: (40, 200, 60), Target.STOP: (230, 210, 30)}


def write_wav(path, samples: np.ndarray, rate: int = SAMPLE_RATE):
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, rate, samples)
    return path


def tone(freq: float, seconds: float = 1.0, amplitude: float = 0.4, rng: np.random.Generator | None = None) -> np.ndarray:
    """16-bit PCM sine with a little noise."""
    t = np.arange(int(seconds * SAMPLE_RATE)) / SAMPLE_RATE
    wave = amplitude * np.sin(2 * np.pi * freq * t)
    if rng is not None:
        wave += rng.normal(0, 0.01, wave.shape)
    return np.round(np.clip(wave, -1, 1) * 32767).astype(np.int16)


def make_speech_corpus(root, per_class: int, seed: int = 0):
    """``<root>/<word>/<n>.wav`` tones, one frequency per command word."""
    rng = np.random.default_rng(seed)
    for command in COMMANDS:
        for n in range(per_class):
            seconds = 1.0 if n % 3 else 0.8
            write_wav(root / command.word / f"{n:04d}_nohash_0.wav", tone(TONES[command], seconds, rng=rng))
    return root


def make_gtsrb_corpus(root, per_class: int, size: int = 40, annotate: bool = True, seed: int = 0):
    """``<root>/Final_Training/Images/000NN/*.ppm`` with solid-colour signs and optional ROI annotations."""
    rng = np.random.default_rng(seed)
    images = root / "Final_Training" / "Images"
    for class_id, command in DEFAULT_CLASS_MAP.items():
        class_dir = images / f"{class_id:05d}"
        class_dir.mkdir(parents=True)
        rows = []
        for n in range(per_class):
            noise = rng.integers(-15, 16, size=(size, size, 3))
            pixels = np.clip(np.array(COLORS[command]) + noise, 0, 255).astype(np.uint8)
            name = f"00000_{n:05d}.ppm"
            Image.fromarray(pixels).save(class_dir / name)
            roi = {"Roi.X1": 5, "Roi.Y1": 5, "Roi.X2": size - 5, "Roi.Y2": size - 5}
            rows.append({"Filename": name, "Width": size, "Height": size, **roi, "ClassId": class_id})
        if annotate:
            pd.DataFrame(rows).to_csv(class_dir / f"GT-{class_id:05d}.csv", sep=";", index=False)
    return root


def synthetic_features(command: Target, index: int, rng: np.random.Generator, dim: int = 1000) -> AudioFeatures:
    values = rng.normal(0.0, 0.3, dim)
    values[int(command) * 25 : (int(command) + 1) * 25] += 2.0
    name = f"{command.word}/{index:04d}.wav"
    return AudioFeatures(clip_id=name, label=command.word, source=name, values=values)


def synthetic_images(per_class: int, rng: np.random.Generator) -> list[ImageSample]:
    samples = []
    for command in COMMANDS:
        base = np.array(COLORS[command], dtype=np.float32) / 255.0
        for n in range(per_class):
            # quantized like decoded 8-bit images so a saved dataset reloads bit for bit
            noisy = np.clip(base + rng.normal(0, 0.05, (64, 64, 3)), 0, 1)
            pixels = np.rint(noisy * 255).astype(np.uint8).astype(np.float32) / 255.0
            samples.append(ImageSample(pixels=pixels, command=command, source_id=f"{command.word}/{n:05d}.ppm"))
    return samples


def synthetic_dataset(
    clips_per_class: int, images_per_class: int = 8, anomaly_fraction: float = 0.5, seed: int = 0
) -> PairedDataset:
    """A paired dataset whose audio features and images carry their class in plain sight."""
    rng = np.random.default_rng(seed + 1000)
    audio = [synthetic_features(c, n, rng) for c in COMMANDS for n in range(clips_per_class)]
    return build_aid(audio, synthetic_images(images_per_class, rng), anomaly_fraction=anomaly_fraction, seed=seed)


def tiny_spec(arch: Architecture | str, **overrides) -> ModelSpec:
    """The topology of ``arch`` at a width that trains in seconds."""
    arch = Architecture(arch)
    fields = dict(conv_channels=(4, 8, 8), audio_hidden=(16, 8), image_embed=8, fusion_hidden=8, cbam_ratio=4)
    if arch is Architecture.XFLOW:
        fields["deconv_seed"] = (2, 2, 2)
    if arch is Architecture.DECONV_CBP:
        fields.update(audio_hidden=(8,), deconv_seed=(2, 2, 2), sketch_dim=64)
    fields.update(overrides)
    return ModelSpec(arch=arch, **fields)
