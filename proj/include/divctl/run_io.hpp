#pragma once

#include <span>
#include <string>
#include <vector>

#include "divctl/checkpoint.hpp"
#include "divctl/conditions.hpp"
#include "divctl/training.hpp"

namespace divctl {

// File names inside a run directory.
inline constexpr const char* kCheckpointFile = "checkpoint.divc";
inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kSummaryFile = "summary.json";
inline constexpr const char* kResolvedConfigFile = "resolved-config.txt";
inline constexpr const char* kLockFile = ".lock";

// Header: step,l_diff,l_repa,l_total,lr,loss_<condition>... Values use %.17g;
// a condition absent from a batch leaves its cell empty.
std::string metrics_csv(const RunMetrics& metrics);
std::string summary_json(const RunMetrics& metrics, std::uint64_t step, const std::string& config_hex);

void write_text_atomic(const std::string& path, const std::string& text);

// 8-bit binary PGM (P5); [-1, 1] maps to [0, 255].
void write_pgm(const std::string& path, const Image& image);
// Images tiled left to right, top to bottom, as a binary PPM (P6).
void write_ppm_grid(const std::string& path, std::span<const Image> images, std::size_t columns);

// Regenerates metrics.csv and summary.json from the run's checkpoint.
// Throws NotFoundError when the directory or checkpoint is missing.
std::vector<std::string> export_metrics(const std::string& run_dir);

// Exclusive writer lock on a run directory, released on destruction.
class RunLock {
public:
    explicit RunLock(const std::string& dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::string path_;
};

}  // namespace divctl
