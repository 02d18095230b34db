# disc_segmentation/utils.py

import json


def generate_command_response(status=True, status_code="ok", message="Success", data=None):
    """
    A utility function to generate a standardized, single-line command result.
    """
    response_data = {
        "status": status,
        "status_code": status_code,
        "message": message,
    }
    # Only include the 'data' key if data is not None
    if data is not None:
        response_data["data"] = data

    return json.dumps(response_data, sort_keys=True, default=str)


def derive_seed(seed, index):
    """Per-item seed: the run seed XOR-ed with the item index (64-bit)."""
    return (int(seed) ^ int(index)) & 0xFFFFFFFFFFFFFFFF
