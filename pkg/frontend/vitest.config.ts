import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    environment: "node",
    // The end-to-end suite builds a small pipeline run and boots the real
    // HTTP service, which dominates the clock.
    testTimeout: 120_000,
    hookTimeout: 180_000,
  },
});
