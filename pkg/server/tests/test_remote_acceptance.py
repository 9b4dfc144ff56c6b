"""Secondary acceptance: a real CNN behind the wire protocol is attackable.

Fine-tunes the backbone on a synthetic dataset, serves it over HTTP, runs a
20-image smoke campaign from the attack side against remote:<url>, and
checks the reports validate and at least one attack succeeds.
"""

import threading
import time

import numpy as np
import pytest
import uvicorn

from cloudattack.attack import AttackConfig
from cloudattack.cli import main as cloudattack_main
from cloudattack.de import DEConfig
from cloudattack.harness import CampaignConfig, run_campaign, verify_report
from cloudattack.pggn import GeneratorWeights
from cloudattack_server.modelio import load_bundle
from cloudattack_server.service import create_app
from cloudattack_server.training import TrainSettings, finetune


@pytest.fixture(scope="module")
def served_model(tmp_path_factory):
    root = tmp_path_factory.mktemp("secondary")
    data_dir = root / "data"
    cloudattack_main(["synth-data", "--out", str(data_dir), "--n-per-class", "30",
                      "--size", "64", "--seed", "0"])

    weights = root / "model.pt"
    summary = finetune(data_dir, weights, TrainSettings(
        epochs=5, lr=0.01, batch_size=16, input_size=64, seed=0))
    assert summary["holdout_accuracy"] >= 0.8, \
        f"backbone failed to learn the synthetic classes: {summary}"

    app = create_app(load_bundle(weights), deterministic=True)
    config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    for _ in range(200):
        if server.started:
            break
        time.sleep(0.05)
    else:
        pytest.fail("server did not start")
    port = server.servers[0].sockets[0].getsockname()[1]
    yield f"http://127.0.0.1:{port}", root
    server.should_exit = True
    thread.join(timeout=5)


class TestSecondaryAcceptance:
    def test_full_campaign_against_remote_cnn(self, served_model):
        url, root = served_model
        out = root / "campaign"
        cfg = CampaignConfig(
            dataset="synthetic", model=f"remote:{url}", out_dir=str(out),
            attack=AttackConfig(de=DEConfig(np=20, cr=0.8, f=0.5, max_evals=300)),
            seed=99, limit=20, synthetic_images=4, synthetic_size=64)
        gen = GeneratorWeights.random_init(q=52, seed=11)
        report = run_campaign(cfg, gen=gen)

        assert len(report.records) == 20
        problems = verify_report(out)
        assert problems == [], f"report inconsistencies: {problems}"
        successes = sum(r.success for r in report.records)
        print(f"ACCEPTANCE secondary-remote-campaign: "
              f"{'PASS' if successes >= 1 else 'FAIL'}  "
              f"successes={successes}/{sum(not r.skipped for r in report.records)} "
              f"asr={report.asr} aq={report.aq}")
        assert successes >= 1
