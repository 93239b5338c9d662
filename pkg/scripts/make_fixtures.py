#!/usr/bin/env python3
"""Regenerate the fixture tree: tracker payloads, knowledge base, labeled
dataset, word vectors, study triples, annotations, the trained detector
model, the embedded knowledge index, and the replay cache.

The replay cache is produced by running the real pipeline code in record
mode against a deterministic scripted provider, so replay-mode runs in the
test suite exercise exactly the requests recorded here. Everything in this
script is seeded or content-hashed; rerunning it reproduces the same tree
(cache entry order included, because recording is single-threaded).
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import shutil
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from brqual import detect as detect_mod
from brqual import improve as improve_mod
from brqual import rag
from brqual.gateway import GatewayConfig, ProviderGateway
from brqual.ingest import FetchQuery, FixtureTracker, fetch_reports
from brqual.model import dump_json, write_jsonl
from brqual.preprocess import ExtractionRules, clean_text, default_rules_path, match_headers, preprocess_report
from brqual.prompts import PromptCatalog, default_catalog_dir
from brqual.evaluate import (S2R_LEAVES, OB_LEAVES, EB_LEAVES, StudyTriple,
                             WordVectorTable, check_completeness,
                             completeness_rates, run_similarity_study)

FIXTURES = ROOT / "fixtures"
EMBED_DIM = 24
FIXED_CLOCK = "2025-08-01T00:00:00Z"
SEED = 20250801


# --------------------------------------------------------------------------
# tracker payloads
# --------------------------------------------------------------------------

def _payload(key, summary, description, resolution, versions=(), priority=None,
             comments=(), links=(), created="2025-03-10T09:00:00.000+0000",
             updated="2025-03-12T09:00:00.000+0000", status="Resolved"):
    return {
        "key": key,
        "fields": {
            "summary": summary,
            "description": description,
            "created": created,
            "updated": updated,
            "status": {"name": status if resolution else "Open"},
            "resolution": {"name": resolution} if resolution else None,
            "comment": {"comments": [
                {"author": {"displayName": a}, "body": b,
                 "created": "2025-03-11T10:00:00.000+0000"}
                for a, b in comments]},
            "versions": [{"name": v} for v in versions],
            "priority": {"name": priority} if priority else None,
            "issuelinks": [
                {"type": {"name": t}, "outwardIssue": {"key": k}} for t, k in links],
        },
    }


def tracker_payloads():
    P = _payload
    return [
        # --- complete reports with explicit headers (4) ---
        P("MCFX-0001", "Hopper stops pulling from locked chest",
          "Steps to reproduce:\n1. Place a chest on the ground\n2. Place a hopper directly beneath the chest\n3. Put 16 cobblestone into the chest\n\n"
          "Observed behavior:\nThe hopper pulls nothing once the chest lid animation finishes\n\n"
          "Expected behavior:\nThe hopper should pull items from the chest at the normal rate\n\n"
          "Environment:\nJava Edition 1.21.4 on Windows 11",
          "Awaiting Response", versions=("1.21.4",), priority="Normal"),
        P("MCFX-0002", "Creeper explosion leaves floating gravel",
          "Steps to reproduce:\n1. Spawn a creeper next to a gravel column\n2. Let it explode at the base\n\n"
          "Observed behavior:\nThe gravel above the blast stays floating in the air\n\n"
          "Expected behavior:\nUnsupported gravel should fall after the explosion",
          None, versions=("1.21.4", "1.21.5")),
        P("MCFX-0003", "Minecart with chest loses items on curve",
          "How to reproduce:\n1. Place a powered rail leading into a curve\n2. Send a minecart with chest through at full speed\n\n"
          "Actual result:\nThe chest cart derails and its items vanish from the world\n\n"
          "Expected result:\nThe cart should follow the curve and keep its inventory",
          "Fixed", versions=("1.21.3",), priority="Important"),
        P("MCFX-0004", "Beacon beam invisible through tinted glass",
          "S2R:\n1. Build a full beacon pyramid\n2. Place tinted glass two blocks above the beacon\n\n"
          "OB:\nThe beam disappears entirely above the glass\n\n"
          "EB:\nThe beam should pass through with reduced brightness",
          "Duplicate", versions=("1.21.5",),
          links=(("Duplicate", "MCFX-0003"),)),
        # --- header subsets (6) ---
        P("MCFX-0005", "Iron golem spawns inside wall",
          "Steps to reproduce:\n1. Build an iron farm with three villagers\n2. Wait for the golem spawn attempt\n\n"
          "Observed behavior:\nThe golem spawns clipped halfway into the cobblestone wall",
          "Awaiting Response", versions=("1.21.4",)),
        P("MCFX-0006", "Anvil renaming clears enchantments",
          "Steps:\n1. Enchant a diamond sword with sharpness\n2. Rename it on the anvil\n\n"
          "Expected behavior:\nRenaming should keep every enchantment on the item",
          "Incomplete", priority="Normal"),
        P("MCFX-0007", "Sculk sensor ignores wool footsteps",
          "Observed behavior:\nThe sensor lights up even when I walk on wool\n\n"
          "Expected behavior:\nWool should muffle footsteps so the sensor stays dark",
          "Cannot Reproduce", versions=("1.21.5",)),
        P("MCFX-0008", "Villager trades lock after two cycles",
          "Steps:\n1. Load a superflat world\n2. Spawn a villager with an egg\n3. Trade the same offer until it locks",
          "Awaiting Response"),
        P("MCFX-0009", "Pickaxe durability bar flickers",
          "Actual result: The durability bar on the pickaxe flickers between two values while mining",
          "Invalid", versions=("1.21.2",)),
        P("MCFX-0010", "Chunk border artifacts after teleport",
          "Expected behavior:\nThe chunk should reload without visual artifacts",
          "Works As Intended", versions=("1.21.4",), priority="Low"),
        # --- header-free prose (8) ---
        P("MCFX-0011", "Hopper stops pulling items",
          "Open a new world and place a hopper under a chest. Put 16 cobblestone into the chest. The hopper stopped pulling items after the first stack.",
          "Awaiting Response", versions=("1.21.4",)),
        P("MCFX-0012", "Boat disappears on ice",
          "The boat vanished when I drove it onto the packed ice. I looked everywhere and it never came back.",
          "Cannot Reproduce"),
        P("MCFX-0013", "Lily pads too fragile",
          "1. Stand on a lily pad\n2. Jump repeatedly on the pad\n3. Jump once more from a higher block",
          "Incomplete", versions=("1.21.5",)),
        P("MCFX-0014", "Compass confusion in the nether",
          "The compass should point to the lodestone after it is placed in the nether. It ought to keep working in every dimension.",
          "Duplicate", links=(("Duplicate", "MCFX-0001"),)),
        P("MCFX-0015", "Game crashes while loading chunks",
          "Running Java Edition 1.21.4 on Windows 11. The game crashed to desktop while loading the chunk at spawn.",
          None, priority="Critical"),
        P("MCFX-0016", "Weird lighting with stained glass",
          "There is something odd about the way light passes through stained glass in my base. It has been like this for a while and my friends see it too.",
          "Awaiting Response"),
        P("MCFX-0017", "Beacon haste not applied to mining",
          "Craft a beacon and place it on a full pyramid. Select the haste effect from the beacon menu.",
          "Fixed", versions=("1.21.4",)),
        P("MCFX-0018", "Sheep get stuck in fences",
          "My sheep got stuck inside the fence block after shearing. They failed to path out even after I broke the gate.",
          "Invalid"),
        # --- markup heavy (4) ---
        P("MCFX-0019", "Minecart duplicates on curve",
          "See the clip at https://example.com/clip.mp4\n\nSteps to reproduce:\n1. Place a {color:red}powered rail{color} on a curve\n2. Send a minecart through at speed\n\nObserved behavior:\nThe minecart *duplicates* at the curve",
          "Awaiting Response", versions=("1.21.5",)),
        P("MCFX-0020", "Composter eats items",
          "<b>Items</b> thrown into the <i>composter</i> vanished instantly. Nothing happens to the compost level.",
          "Duplicate", links=(("Duplicate", "MCFX-0002"),)),
        P("MCFX-0021", "Sponge never dries in nether",
          "{quote}I think this is intended but posting anyway{quote}\nMore info at www.example.org/wiki\nExpected result: The wet sponge should dry out instantly in the nether",
          "Won't Fix", versions=("1.21.1",)),
        P("MCFX-0022", "FPS drops with shulker boxes",
          "The debug screen shows {code}fps=4{code} whenever shulker boxes render on screen. My usual framerate dropped from 120 to single digits.",
          "Incomplete", versions=("1.21.4",), priority="Normal"),
        # --- empty / near-empty descriptions (3) ---
        P("MCFX-0023", "World upgrade hangs forever", "",
          "Awaiting Response", versions=("1.21.5",), priority="Normal"),
        P("MCFX-0024", "Cannot join realm after update", "",
          "Cannot Reproduce"),
        P("MCFX-0025", "Launcher shows wrong version", "   \n  ",
          None, versions=("1.21.0",)),
        # --- metadata / structure oddballs (8) ---
        P("MCFX-0026", "Furnace minecart stalls uphill",
          "The furnace minecart got stuck on the incline and lagged the whole server afterwards.",
          "Fixed", versions=("1.21.3", "1.21.4"), priority="Important"),
        P("MCFX-0027", "Elytra wall collision deals no damage",
          "1. Equip elytra and take off\n2. Fly into a wall at full speed\n3. Fly into a second wall",
          "Awaiting Response", versions=("1.21.4",)),
        P("MCFX-0028", "Realms invite screen empty",
          "It worked fine last week but now the whole screen is blank for me, dunno why.",
          "Incomplete"),
        P("MCFX-0029", "Item duplication with piston timing",
          "How to reproduce:\n1. Place a sticky piston facing a slime block\n2. Power it with a comparator clock\n3. Throw an item onto the slime block\n\n"
          "Actual result:\nThe item splits into two stacks on every retraction. Both stacks can be picked up.\n\n"
          "Expected:\nNo dupe",
          "Awaiting Response", versions=("1.21.5",), priority="Critical"),
        P("MCFX-0030", "Copper bulb needs two pulses",
          "Version: 1.21.5\nWhat should happen: Copper bulbs should toggle with one redstone pulse\nWhat happened: they need two pulses to change state",
          "Works As Intended"),
        P("MCFX-0031", "Anvil consumes book without applying",
          "Observed behavior: The anvil consumed the enchanted book without applying the enchantment to the pickaxe",
          "Awaiting Response", versions=("1.21.4",)),
        P("MCFX-0032", "Netherite pickaxe burns in lava",
          "Expected behavior: Netherite tools should survive floating in lava like netherite ingots do",
          "Duplicate", links=(("Duplicate", "MCFX-0014"),)),
        P("MCFX-0033", "Dog teleports into walls",
          "My wolf got stuck inside the wall and suffocated after teleporting to me.",
          "Awaiting Response", versions=("1.21.4",),
          comments=(("helper", "Does this happen in 1.21.5 too?"),
                    ("reporter", "yes, same thing"),
                    ("helper", "Need exact coordinates please"))),
    ]


# keys whose recorded extraction completion is deliberately broken
MALFORMED_EXTRACTION_KEY = "MCFX-0031"
UNGROUNDED_EXTRACTION_KEY = "MCFX-0032"


# --------------------------------------------------------------------------
# knowledge documents
# --------------------------------------------------------------------------

def knowledge_documents():
    hopper_long = (
        "A hopper is a low-capacity storage block that can move items into and out of "
        "containers. A hopper pulls items from the container directly above it at a rate "
        "of 2.5 items per second, and pushes items into the container it points toward at "
        "the same rate. Hoppers check for item entities in the block space above them every "
        "game tick. A hopper that is powered by a redstone signal is locked and moves no "
        "items while the signal lasts. Locked hoppers still report their fill level to "
        "comparators. A hopper minecart pulls items much faster than a stationary hopper "
        "and can collect items through a full block directly above the track. "
        "When a chest is opened by a player the lid animation plays, but opening a chest "
        "does not pause hopper transfers; transfers continue regardless of lid state. "
        "Hoppers interact with double chests as a single inventory of 54 slots and always "
        "pull from the first non-empty slot in reading order. A hopper chain moves one item "
        "every 8 game ticks per hopper, so long chains add latency but not throughput. "
        "Comparator readings from hoppers scale with the total number of items relative to "
        "stack sizes, which makes hoppers common clock components in item-sorting circuits. "
        "Item sorters rely on precise hopper timing: an overflow of unsorted items can "
        "break a sorter if the filter slots are not protected by renamed filler items. "
        "Hopper transfer order is deterministic within a tick: push happens before pull, "
        "which matters for machines that race a hopper against a dropper pointing into the "
        "same container. Breaking a hopper with a pickaxe drops the hopper and all items "
        "inside it as entities. Hoppers cannot be moved by pistons."
    )
    return [
        {"title": "Hopper", "url": "https://wiki.example/Hopper", "body": hopper_long},
        {"title": "Creeper", "url": "https://wiki.example/Creeper", "body": (
            "Creepers are hostile mobs that silently approach players and explode. The "
            "explosion has a power of 3, breaking most blocks near the blast center. "
            "Gravity-affected blocks such as sand and gravel fall when the blocks beneath "
            "them are destroyed, but only after receiving a block update; gravel left "
            "without an update can appear to float until a neighboring block changes. "
            "Charged creepers, created by lightning, have a larger explosion radius.")},
        {"title": "Minecart", "url": "https://wiki.example/Minecart", "body": (
            "Minecarts travel along rails and come in several variants, including minecarts "
            "with chests and with furnaces. Powered rails accelerate carts when redstone "
            "powered. A cart entering a curve at high speed is slowed to the rail maximum "
            "of 8 blocks per second; carts never derail from intact curves. A minecart "
            "with chest keeps its inventory when broken, dropping the items as entities. "
            "Furnace minecarts push other carts and consume fuel; they lose momentum on "
            "slopes faster than occupied carts.")},
        {"title": "Beacon", "url": "https://wiki.example/Beacon", "body": (
            "A beacon projects a vertical light beam and grants status effects such as "
            "Haste, which increases mining speed by 20 percent per level. The beam passes "
            "through tinted glass with its color filtered but remains visible; only opaque "
            "blocks stop the beam entirely. A beacon requires an unobstructed view of the "
            "sky and a pyramid of iron, gold, emerald, diamond, or netherite blocks. The "
            "Haste effect applies to all mining tools while the player stays in range.")},
        {"title": "Villager trading", "url": "https://wiki.example/Trading", "body": (
            "Villagers offer trades that restock up to twice per day when the villager can "
            "work at its job site block. A trade that has been used too many times locks "
            "until the next restock; the red X over an offer indicates a locked trade. "
            "Trading raises the villager's experience and can unlock higher-tier offers. "
            "A villager separated from its job site cannot restock and its locked trades "
            "persist across save and load.")},
        {"title": "Elytra", "url": "https://wiki.example/Elytra", "body": (
            "Elytra let players glide. Colliding with a wall during a glide deals damage "
            "proportional to the speed lost on impact; gentle grazes deal none. Kinetic "
            "damage can kill a player at full flight speed. Fireworks boost glide speed. "
            "Elytra lose durability one point per second of gliding and stop working at "
            "one durability remaining.")},
        {"title": "Redstone circuits", "url": "https://wiki.example/Redstone", "body": (
            "Redstone components transmit signals with strengths from 0 to 15. A sticky "
            "piston retracts its block only on a full retraction pulse; a one-tick pulse "
            "causes the piston to drop the block instead, which is the basis of several "
            "duplication exploits patched over the years. Comparator clocks emit pulses at "
            "configurable intervals. Copper bulbs toggle their lit state on the rising "
            "edge of a redstone pulse, one toggle per pulse.")},
        {"title": "Chunk", "url": "https://wiki.example/Chunk", "body": (
            "A chunk is a 16 by 16 column of blocks. Chunks load around players within the "
            "render distance; teleporting forces a reload of the surrounding chunks. "
            "Rendering artifacts at chunk borders usually clear after the chunk mesh "
            "rebuilds. Upgrading a world rewrites every stored chunk to the newest format, "
            "which can take minutes for large worlds but must never hang indefinitely.")},
    ]


# --------------------------------------------------------------------------
# labeled training data for the reference classifier
# --------------------------------------------------------------------------

_HIGH_TEMPLATES = [
    "steps to reproduce: 1. open the world 2. place a {noun} and use it 3. observe the result. observed behavior: the {noun} {verb} right away. expected behavior: the {noun} should work as the wiki describes.",
    "how to reproduce: 1. load a test world 2. put the {noun} down 3. press the button. observed: the {noun} {verb}. expected: it should respond on the first try, version 1.21.4.",
    "steps: 1. craft a {noun} 2. activate it near spawn. observed result: the {noun} {verb} after a second. expected result: the {noun} should stay stable in every version.",
]
_LOW_TEMPLATES = [
    "my {noun} is broken again pls fix, happens all the time, real annoying",
    "the {noun} just {verb} idk why, game is unplayable for me and my friends",
    "{noun} bug!!! seriously mojang this {verb} every single day, do something",
    "help - {noun} acting weird since last week, cannot play like this",
]
_NOUNS = ["hopper", "beacon", "minecart", "villager", "piston", "composter",
          "sensor", "anvil", "furnace", "compass"]
_VERBS = ["crashed", "vanished", "froze", "failed", "glitched"]


def labeled_examples():
    rng = random.Random(SEED)
    rows = []
    for i in range(20):
        template = _HIGH_TEMPLATES[i % len(_HIGH_TEMPLATES)]
        text = template.format(noun=rng.choice(_NOUNS), verb=rng.choice(_VERBS))
        rows.append({"key": f"TRAIN-H{i:03d}", "text": text, "label": "high_quality"})
    for i in range(20):
        template = _LOW_TEMPLATES[i % len(_LOW_TEMPLATES)]
        text = template.format(noun=rng.choice(_NOUNS), verb=rng.choice(_VERBS))
        rows.append({"key": f"TRAIN-L{i:03d}", "text": text, "label": "low_quality"})
    return rows


# --------------------------------------------------------------------------
# similarity study triples and word vectors
# --------------------------------------------------------------------------

_TRIPLE_THEMES = [
    ("hopper", "chest", "cobblestone"), ("creeper", "gravel", "explosion"),
    ("minecart", "curve", "rail"), ("beacon", "glass", "beam"),
    ("villager", "trade", "restock"), ("elytra", "wall", "damage"),
    ("piston", "slime", "pulse"), ("chunk", "border", "reload"),
    ("anvil", "book", "enchant"), ("sponge", "nether", "dry"),
]


def build_triples():
    triples = []
    for i, (a, b, c) in enumerate(_TRIPLE_THEMES):
        gt = {
            "steps_to_reproduce": f"place the {a} next to the {b} then activate the {c} and repeat the action until the {a} reacts and record each attempt in order",
            "observed_behavior": f"the {a} interacts with the {b} incorrectly and the {c} state is wrong afterwards leaving the world in a broken configuration every time",
            "expected_behavior": f"the {a} should handle the {b} correctly so that the {c} ends in the documented state described by the wiki for this mechanic",
        }
        raw, imp_a, imp_b = {}, {}, {}
        for section, text in gt.items():
            tokens = text.split()
            raw[section] = " ".join(tokens[:4] + ["plz", "fix", f"r{i}"])
            imp_a[section] = " ".join(tokens[: int(len(tokens) * 0.5)] + [f"extra{i}", "words"])
            imp_b[section] = " ".join(tokens[: int(len(tokens) * 0.85)] + [f"more{i}"])
        triples.append({"key": f"TRIPLE-{i:02d}", "raw": raw, "improved_a": imp_a,
                        "improved_b": imp_b, "ground_truth": gt})
    return triples


def build_wordvecs(triples, dim=EMBED_DIM):
    vocab = set()
    for t in triples:
        for version in ("raw", "improved_a", "improved_b", "ground_truth"):
            for text in t[version].values():
                vocab.update(re.findall(r"[a-z0-9]+", text.lower()))
    lines = [f"{len(vocab)} {dim}"]
    for token in sorted(vocab):
        seed = int.from_bytes(hashlib.sha256(token.encode()).digest()[:4], "big")
        vec = np.random.RandomState(seed).standard_normal(dim)
        vec /= np.linalg.norm(vec)
        lines.append(token + " " + " ".join(f"{v:.6f}" for v in vec))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# synthetic manual annotations
# --------------------------------------------------------------------------

def build_annotations(keys):
    rng = random.Random(SEED + 7)
    rows = []
    raw_s2r = ["non_executable.missing_info"] * 5 + ["non_executable.ambiguous_info"] * 2 \
        + ["executable.irreproducible"] * 2 + [None]
    imp_s2r = ["executable.irreproducible"] * 4 + ["executable.reproducible.valid"] * 2 \
        + ["executable.reproducible.invalid"] + ["non_executable.wrong_info"] * 2 \
        + ["non_executable.ambiguous_info"]
    raw_ob = ["present.sufficient"] * 5 + ["present.insufficient"] * 3 + [None] * 2
    imp_ob = ["present.sufficient"] * 8 + ["present.insufficient"] * 2
    raw_eb = [None] * 7 + ["present.accurate"] * 2 + ["present.inaccurate"]
    imp_eb = ["present.accurate"] * 8 + ["present.inaccurate"] * 2

    def perturb(label, universe):
        if rng.random() < 0.15:
            alternatives = [u for u in list(universe) + [None] if u != label]
            return rng.choice(alternatives)
        return label

    for key in keys:
        for version, s2r_pool, ob_pool, eb_pool in (
                ("raw", raw_s2r, raw_ob, raw_eb),
                ("improved", imp_s2r, imp_ob, imp_eb)):
            s2r = rng.choice(s2r_pool)
            ob = rng.choice(ob_pool)
            eb = rng.choice(eb_pool)
            rows.append({"key": key, "version": version, "annotator": "ann-a",
                         "s2r_label": s2r, "ob_label": ob, "eb_label": eb})
            rows.append({"key": key, "version": version, "annotator": "ann-b",
                         "s2r_label": perturb(s2r, S2R_LEAVES),
                         "ob_label": perturb(ob, OB_LEAVES),
                         "eb_label": perturb(eb, EB_LEAVES)})
    return rows


# --------------------------------------------------------------------------
# scripted provider transport
# --------------------------------------------------------------------------

def pseudo_embedding(text, dim=EMBED_DIM):
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "big")
    vec = np.random.RandomState(seed).standard_normal(dim)
    vec /= np.linalg.norm(vec)
    return [float(f"{v:.8f}") for v in vec]


class ScriptedTransport:
    """Deterministic provider stand-in used only while recording fixtures."""

    def __init__(self, rules):
        self.rules = rules

    # -- chat ---------------------------------------------------------------

    def chat(self, body):
        prompt_id = body.get("prompt_id", "")
        user = body["user"]
        if prompt_id.startswith("preprocess.extract"):
            return self._extract(user)
        if prompt_id.startswith("detect.analyze"):
            return self._analyze(user)
        if prompt_id.startswith("rag.querygen"):
            return self._querygen(user)
        if prompt_id.startswith("improve."):
            return self._improve(prompt_id, user)
        raise AssertionError(f"scripted transport got unknown prompt {prompt_id!r}")

    def _extract(self, user):
        key = re.search(r"Report key: (\S+)", user).group(1)
        if key == MALFORMED_EXTRACTION_KEY:
            return "I could not find any sections in this report, sorry."
        description = user.split("Description:\n", 1)[1]
        if key == UNGROUNDED_EXTRACTION_KEY:
            return ("[steps_to_reproduce]\n(none)\n[environment]\n(none)\n"
                    "[observed_behavior]\n(none)\n[expected_behavior]\n"
                    "players can fly forever across every dimension without limits")
        headers, _ = match_headers(description, self.rules)
        blocks = []
        for kind in ("steps_to_reproduce", "environment",
                     "observed_behavior", "expected_behavior"):
            content = next((v for k, v in headers.items() if k.value == kind), "")
            blocks.append(f"[{kind}]\n{content if content else '(none)'}")
        return "\n".join(blocks)

    def _analyze(self, user):
        flags_text = user.split("Heuristic flags:\n", 1)[1]
        lines = []
        missing = re.findall(r"- ([a-z_]+) missing:", flags_text)
        for section in missing:
            lines.append(f"ISSUE: {section} | missing | The {section.replace('_', ' ')} "
                         f"section cannot be found in the report.")
            lines.append(f"RECOMMEND: Add a concrete {section.replace('_', ' ')} section.")
        if not missing:
            lines.append("ISSUE: steps_to_reproduce | ambiguous | The steps lack the "
                         "detail needed to follow them exactly.")
            lines.append("RECOMMEND: Spell out each action with exact item names.")
        return "\n".join(lines)

    def _querygen(self, user):
        summary = re.search(r"Summary: (.*)", user).group(1).strip()
        words = summary.lower().split()
        queries = [summary or "minecraft bug"]
        if len(words) >= 2:
            queries.append("minecraft " + " ".join(words[:2]) + " mechanics")
        if words:
            queries.append(words[-1] + " wiki behavior")
        return "\n".join(queries)

    def _improve(self, prompt_id, user):
        section = prompt_id.split(".")[1]
        context = ""
        match = re.search(r"([a-z_]+):\n(.+)", user)
        if match:
            context = " ".join(match.group(2).split()[:8])
        grounded = "### Retrieved knowledge" in user
        hint = "following the wiki mechanics above" if grounded else "as described"
        if section == "s2r":
            return ("1. Launch Minecraft and load a new test world\n"
                    f"2. Recreate the reported setup: {context or 'the affected feature'}\n"
                    f"3. Trigger the interaction {hint}\n"
                    "4. Watch for the reported failure and note the result")
        if section == "ob":
            return (f"After performing the steps, the reported issue occurs: "
                    f"{context or 'the feature misbehaves'}. The state persists until "
                    f"the world is reloaded, {hint}.")
        return (f"The game should complete the interaction without the reported fault, "
                f"{hint}; the mechanic involving {context or 'the feature'} should end "
                f"in its documented state.")

    # -- embed / rerank -------------------------------------------------------

    def embed(self, model, texts):
        return [pseudo_embedding(t) for t in texts]

    def rerank(self, model, query, candidates):
        raise AssertionError("fixtures use lexical rerank; remote rerank not scripted")


# --------------------------------------------------------------------------
# main build
# --------------------------------------------------------------------------

def write_config(path):
    config = {
        "tracker": {"fixture_dir": "tracker", "project": "MCFX", "max_results": 100},
        "provider": {"mode": "replay", "cache_path": "cache.jsonl",
                     "embed_dim": EMBED_DIM, "rerank_mode": "lexical",
                     "max_concurrency": 4},
        "detect": {"model_path": "model.json"},
        "rag": {"index_dir": "kb"},
        "improve": {"token_budget": 8000},
        "eval": {"embeddings_path": "wordvecs.txt", "triples_path": "triples.jsonl",
                 "annotations_path": "annotations.jsonl"},
        "paths": {"out_dir": "out", "labels": "labels.jsonl",
                  "knowledge": "knowledge.jsonl"},
    }
    import yaml
    path.write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")


def main():
    rules = ExtractionRules.load(default_rules_path())
    catalog = PromptCatalog(default_catalog_dir())

    # start clean
    for name in ("cache.jsonl", "model.json", "knowledge.jsonl", "labels.jsonl",
                 "wordvecs.txt", "triples.jsonl", "annotations.jsonl", "config.yaml"):
        (FIXTURES / name).unlink(missing_ok=True)
    for sub in ("tracker", "kb", "out"):
        shutil.rmtree(FIXTURES / sub, ignore_errors=True)
    (FIXTURES / "tracker").mkdir(parents=True, exist_ok=True)

    payloads = tracker_payloads()
    for payload in payloads:
        (FIXTURES / "tracker" / f"{payload['key']}.json").write_text(
            json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    print(f"tracker payloads: {len(payloads)}")

    write_jsonl(FIXTURES / "knowledge.jsonl", knowledge_documents())
    labels = labeled_examples()
    write_jsonl(FIXTURES / "labels.jsonl", labels)

    triples = build_triples()
    write_jsonl(FIXTURES / "triples.jsonl", triples)
    (FIXTURES / "wordvecs.txt").write_text(build_wordvecs(triples), encoding="utf-8")

    keys = [p["key"] for p in payloads]
    write_jsonl(FIXTURES / "annotations.jsonl", build_annotations(keys))
    write_config(FIXTURES / "config.yaml")

    # train the reference detector
    examples = [detect_mod.LabeledExample.from_dict(row) for row in labels]
    model = detect_mod.train_classifier(examples, {"seed": 0, "trained_at": FIXED_CLOCK})
    model.save(FIXTURES / "model.json")
    print(f"model: vocab={len(model.vocabulary)} "
          f"val_acc={model.metadata['validation_accuracy']}")

    # record phase: run the pipeline against the scripted provider
    gw_config = GatewayConfig(mode="record", cache_path=str(FIXTURES / "cache.jsonl"),
                              embed_dim=EMBED_DIM, rerank_mode="lexical",
                              max_concurrency=1)
    gateway = ProviderGateway(gw_config, transport=ScriptedTransport(rules),
                              clock=lambda: FIXED_CLOCK)

    corpus = fetch_reports(FetchQuery(project_key="MCFX", max_results=100),
                           FixtureTracker(FIXTURES / "tracker"))
    assert len(corpus) == len(payloads)

    index = rag.ingest_knowledge(knowledge_documents(), gateway,
                                 index_dir=FIXTURES / "kb", built_at=FIXED_CLOCK)
    print(f"knowledge index: {len(index)} chunks, dim {index.dimension}")

    outcomes = [preprocess_report(raw, gateway, catalog, rules) for raw in corpus]
    preprocessed = sorted((o.report for o in outcomes), key=lambda r: r.key)
    raw_rates = completeness_rates([check_completeness(r) for r in preprocessed])
    print(f"raw completeness: {raw_rates['complete']:.3f}")
    assert raw_rates["complete"] <= 0.20, f"raw completeness too high: {raw_rates}"

    # complete fixtures must score below the gate so detection stays silent
    raw_by_key = {r.key: r for r in corpus}
    for report in preprocessed:
        if check_completeness(report).complete:
            raw = raw_by_key[report.key]
            score = detect_mod.classify(model, f"{raw.summary}\n{raw.description}")
            assert score < model.threshold, f"{report.key}: complete but scores {score:.3f}"

    detections = []
    for report in preprocessed:
        raw = raw_by_key[report.key]
        detections.append(detect_mod.detect_report(report, raw.summary, raw.description,
                                                   model, gateway, catalog))
    flagged = sum(1 for d in detections if d.verdict.value == "fail")
    print(f"detections: {flagged}/{len(detections)} flagged")

    detections_by_key = {d.key: d for d in detections}
    variants = [("full", improve_mod.AblationConfig()),
                ("no-rag", improve_mod.AblationConfig(rag=False)),
                ("no-detector", improve_mod.AblationConfig(detector=False)),
                ("no-fewshot", improve_mod.AblationConfig(few_shot=False))]
    for name, ablation in variants:
        improved = []
        for report in preprocessed:
            raw = raw_by_key[report.key]
            improved.append(improve_mod.improve_report(
                report, detections_by_key[report.key], gateway,
                index if ablation.rag else None, catalog, ablation,
                summary=raw.summary, description=raw.description))
        rates = completeness_rates([check_completeness(r.base) for r in improved])
        print(f"improved completeness ({name}): {rates['complete']:.3f}")
        if name == "full":
            assert rates["complete"] >= 0.95, f"improved completeness too low: {rates}"

    # similarity fixture sanity: raw strictly below both improved variants
    table = WordVectorTable.load(FIXTURES / "wordvecs.txt")
    study = run_similarity_study([StudyTriple.from_dict(t) for t in triples], table)
    for metric, by_comp in study.means.items():
        for comp, by_version in by_comp.items():
            assert by_version["raw"] < by_version["improved_a"] < by_version["improved_b"], \
                f"similarity not monotone for {metric}/{comp}: {by_version}"
    print(f"similarity study: {len(study.tests)} tests, "
          f"alpha {study.corrected_alpha:.4f}")

    cache_lines = (FIXTURES / "cache.jsonl").read_text().count("\n")
    print(f"replay cache: {cache_lines} entries")
    shutil.rmtree(FIXTURES / "out", ignore_errors=True)
    print("fixtures written to", FIXTURES)


if __name__ == "__main__":
    main()
