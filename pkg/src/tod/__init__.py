"""Text-only debiasing of a frozen dual encoder on a synthetic world.

Modules:
    encoder  -- frozen token/image encoder with a closed-form backward pass
    world    -- generated attribute schema, text/image dataset builders
    tuner    -- composition prompts, ranking loss, SGD training loop
    evaluate -- argmax inference, group-robustness metrics, selection
    harness  -- experiment configs, scenarios, CSV artifacts, manifests
    cli      -- command-line front end (`tod run`, `tod check`, ...)
"""

__version__ = "0.1.0"
