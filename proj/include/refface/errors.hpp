#pragma once

#include <stdexcept>
#include <string>

namespace refface {

// Invalid or out-of-range configuration value. CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A required input artifact (image, manifest, checkpoint) is absent or unreadable.
// CLI maps this to exit code 3. `path` names the missing artifact.
struct MissingArtifactError : std::runtime_error {
    std::string path;
    explicit MissingArtifactError(const std::string& p)
        : std::runtime_error("missing artifact: " + p), path(p) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Training finished without meeting its contract (e.g. encoder separation gap).
struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& what) : std::runtime_error(what) {}
};

// Rejection sampling could not produce a valid sample.
struct GenerationError : std::runtime_error {
    explicit GenerationError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace refface
