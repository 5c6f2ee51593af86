"""Class vocabularies, component definitions, and the fixed label palettes.

Label maps store small integer class ids; 255 marks pixels excluded from
every loss and metric.  The coarse vocabulary covers whole-image parsing
(background / skin / hair); the fine vocabulary adds the facial
components, with left and right eyes and brows kept as separate ids so
crops and mirroring stay side-aware.
"""

IGNORE_LABEL = 255

COARSE_CLASSES = ("background", "skin", "hair")

FINE_CLASSES = ("background", "skin", "brow_left", "brow_right", "eye_left",
                "eye_right", "nose", "lip_upper", "mouth_inner", "lip_lower",
                "hair")

CLASS_NAMES = {"coarse": COARSE_CLASSES, "fine": FINE_CLASSES}

# Coarse id -> fine id when seeding a fine map from a coarse prediction.
COARSE_TO_FINE = {0: 0, 1: 1, 2: 10}

# Fine id -> coarse id (components count as skin).
FINE_TO_COARSE = {0: 0, 1: 1, 2: 1, 3: 1, 4: 1, 5: 1, 6: 1, 7: 1, 8: 1, 9: 1,
                  10: 2}

# Fine label id pairs exchanged when an image is mirrored horizontally.
MIRROR_SWAP_FINE = ((2, 3), (4, 5))

# Component crops, their patch extents (H, W) and class bookkeeping.
COMPONENT_KINDS = ("eye_left", "eye_right", "nose", "mouth")

PATCH_EXTENTS = {"eye_left": (64, 64), "eye_right": (64, 64),
                 "nose": (64, 64), "mouth": (32, 64)}

# Fine ids forming each component's foreground (box source and supervision).
COMPONENT_FINE_IDS = {"eye_left": (2, 4), "eye_right": (3, 5),
                      "nose": (6,), "mouth": (7, 8, 9)}

# Which sub-network parses which crop kind.
COMPONENT_NET = {"eye_left": "eye", "eye_right": "eye",
                 "nose": "nose", "mouth": "mouth"}

COMPONENT_NET_CLASSES = {"eye": ("other", "eyebrow", "eye"),
                         "nose": ("other", "nose"),
                         "mouth": ("other", "lip_upper", "mouth_inner",
                                   "lip_lower")}

# Net-local id -> fine id, per crop kind ("other" never paints back).
COMPONENT_NET_TO_FINE = {"eye_left": {1: 2, 2: 4},
                         "eye_right": {1: 3, 2: 5},
                         "nose": {1: 6},
                         "mouth": {1: 7, 2: 8, 3: 9}}

# Merged groups reported by fine-vocabulary evaluation (paper-style rows).
FINE_EVAL_GROUPS = {"eyes": (4, 5), "brows": (2, 3), "nose": (6,),
                    "lip_upper": (7,), "mouth_inner": (8,), "lip_lower": (9,),
                    "mouth": (7, 8, 9), "skin": (1,)}

# Groups averaged into the mean component F-measure (mouth union excluded:
# its members are already counted individually).
COMPONENT_F_GROUPS = ("eyes", "brows", "nose", "lip_upper", "mouth_inner",
                      "lip_lower")

# Fixed render palettes: label id -> RGB.  Documented in the README.
PALETTE_COARSE = {0: (40, 40, 40), 1: (224, 172, 105), 2: (80, 40, 20),
                  IGNORE_LABEL: (128, 128, 128)}

PALETTE_FINE = {0: (40, 40, 40), 1: (224, 172, 105), 2: (150, 75, 0),
                3: (190, 95, 0), 4: (0, 120, 255), 5: (0, 200, 255),
                6: (255, 255, 0), 7: (255, 0, 0), 8: (130, 0, 130),
                9: (200, 0, 80), 10: (80, 40, 20),
                IGNORE_LABEL: (128, 128, 128)}

PALETTES = {"coarse": PALETTE_COARSE, "fine": PALETTE_FINE}


def vocabulary_size(vocabulary):
    if vocabulary == "coarse":
        return len(COARSE_CLASSES)
    if vocabulary == "fine":
        return len(FINE_CLASSES)
    if vocabulary in COMPONENT_NET_CLASSES:
        return len(COMPONENT_NET_CLASSES[vocabulary])
    raise ValueError(f"unknown vocabulary {vocabulary!r}")
