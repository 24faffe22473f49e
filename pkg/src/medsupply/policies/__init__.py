"""Reference external policies speaking the JSON-lines decision protocol."""
