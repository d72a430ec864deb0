"""Caption -> structured semantics -> prompt, answered by fixtures.

Swap the ``mock:`` URLs for a real chat-completions endpoint (and export
SESA_ENDPOINT_KEY) to run against a live model.
"""

import json
from pathlib import Path

from sesa import semantics as S
from sesa.harness.synthetic import gen_synthetic

root = Path("runs/semantics")
gen_synthetic(3, 7, root / "images")
images = sorted((root / "images").glob("target_*.ppm"))

captioner = S.ModelEndpoint("mock:captioner", "captioner", "captioner")
extractor = S.ModelEndpoint("mock:extractor", "extractor", "extractor")

# canned replies keyed by request hash.  The last image gets a non-JSON
# reply and there is no fixture for the repair request, so its line
# records the failure and the run carries on
table = S.FixtureTable()
for i, path in enumerate(images):
    text = f"In the image, a person stands in a room and holds a cup with one hand ({i})."
    table.add(captioner.model, S.caption_messages(path.read_bytes()), text)
    reply = dict(S.FEW_SHOT_OUTPUT, hand_action=f"one hand grips a cup ({i})", env="indoors")
    table.add(extractor.model, S.extract_messages(text), json.dumps(reply) if i < 2 else "sorry, no JSON")
table.save(root / "fixtures.json")

client = S.ChatClient(table)
entries = S.build_dataset(images, S.Endpoints(captioner, extractor), root / "manifest.jsonl", client)
for e in entries:
    print(e["status"], "|", e["final_prompt"] or e["error"])
print(len(client.log), "requests logged")

# the few-shot pair itself composes to
print(S.compose(S.SemanticsRecord(**S.FEW_SHOT_OUTPUT)).final_text)
