"""
Choosing a grasp from geometry
==============================

A mock vision-language client reads box locations from a scene manifest;
the shape label and the neighbouring boxes decide the skill.
"""

from rgmp.gss import SceneManifest, simulate_scene

scene = SceneManifest.from_dict({
    "image": {"width": 640, "height": 480},
    "objects": [
        {"name": "fanta", "box": [100, 100, 140, 200], "shape": "cylindrical"},
        {"name": "cola can", "box": [300, 300, 380, 340], "shape": "squashed"},
        {"name": "tissue", "box": [500, 50, 530, 70], "shape": "thin_small"},
        {"name": "sprite", "box": [145, 110, 185, 210], "shape": "cylindrical"},
    ],
})

for request in ("I want Fanta", "Pass me the crushed cola can", "Pass me the tissue", "I want the sprite"):
    d = simulate_scene(scene, request)
    print(f"{request:30s} -> {d.skill.value:9s} ({d.rule})")
