import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "jsdom",
    include: ["tests/**/*.test.ts"],
    testTimeout: 15000,
    hookTimeout: 60000,
    // the e2e file drives one live service; keep files sequential
    fileParallelism: false,
  },
});
