import { Client } from "./api";
import { createApp } from "./app";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app element");

const params = new URLSearchParams(location.search);
const seed1 = Number(params.get("seed1") ?? "1");
const seed2 = Number(params.get("seed2") ?? "1");

void createApp(root, new Client(""), { seed1, seed2 });
