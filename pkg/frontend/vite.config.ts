import { defineConfig } from "vitest/config";

export default defineConfig({
  // relative asset paths so the bundle works from any static file server
  base: "./",
  server: {
    proxy: { "/api": "http://127.0.0.1:8000" },
  },
  test: {
    environment: "happy-dom",
  },
});
