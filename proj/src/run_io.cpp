#include "divctl/run_io.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "divctl/config.hpp"
#include "divctl/errors.hpp"

namespace divctl {

namespace fs = std::filesystem;

namespace {

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

unsigned char to_byte(double v) {
    const double u = (std::clamp(v, -1.0, 1.0) + 1.0) * 127.5;
    return static_cast<unsigned char>(std::lround(u));
}

RunMetrics metrics_from_checkpoint(const Checkpoint& c) {
    RunMetrics m;
    const std::string ids = c.get("metrics/conditions", BlockKind::text).text;
    std::size_t pos = 0;
    while (pos < ids.size()) {
        const auto comma = ids.find(',', pos);
        m.condition_ids.push_back(ids.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
        pos = comma == std::string::npos ? ids.size() : comma + 1;
    }
    const auto& rec = c.get("metrics/records", BlockKind::f64);
    const std::size_t cols = 5 + m.condition_ids.size();
    if (rec.shape.size() != 2 || rec.shape[1] != cols) {
        throw LoadError("metrics/records has " + shape_str(rec.shape) + ", expected " + std::to_string(cols) +
                        " columns");
    }
    for (std::size_t r = 0; r < rec.shape[0]; ++r) {
        const double* row = rec.f64.data() + r * cols;
        StepRecord s;
        s.loss = {row[1], row[2], row[3], static_cast<std::uint64_t>(row[0])};
        s.lr = row[4];
        s.condition_loss.assign(row + 5, row + cols);
        m.steps.push_back(std::move(s));
    }
    if (const auto* u = c.find("gate/usage_count")) {
        m.gate_usage = u->u64;
    }
    return m;
}

}  // namespace

std::string metrics_csv(const RunMetrics& metrics) {
    std::string out = "step,l_diff,l_repa,l_total,lr";
    for (const auto& id : metrics.condition_ids) {
        out += ",loss_" + id;
    }
    out += "\n";
    for (const auto& r : metrics.steps) {
        out += std::to_string(r.loss.step) + "," + fmt(r.loss.l_diff) + "," + fmt(r.loss.l_repa) + "," +
               fmt(r.loss.l_total) + "," + fmt(r.lr);
        for (double v : r.condition_loss) {
            out += ",";
            if (!std::isnan(v)) {
                out += fmt(v);
            }
        }
        out += "\n";
    }
    return out;
}

std::string summary_json(const RunMetrics& metrics, std::uint64_t step, const std::string& config_hex) {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["config_digest"] = config_hex;
    j["conditions"] = metrics.condition_ids;
    if (!metrics.steps.empty()) {
        const auto& last = metrics.steps.back();
        j["final"] = {{"step", last.loss.step},
                      {"l_diff", last.loss.l_diff},
                      {"l_repa", last.loss.l_repa},
                      {"l_total", last.loss.l_total},
                      {"lr", last.lr}};
        j["mean_l_diff_first_100"] = metrics.mean_l_diff(0, 100);
        j["mean_l_diff_last_100"] = metrics.final_l_diff(100);
        j["mean_l_repa_last_100"] = metrics.final_l_repa(100);
    }
    j["gate_usage"] = metrics.gate_usage;
    if (!metrics.seconds_per_100.empty()) {
        j["seconds_per_100_steps"] = metrics.seconds_per_100;
    }
    return j.dump(2) + "\n";
}

void write_text_atomic(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw ContractError("cannot write '" + tmp + "'");
        }
        out << text;
        if (!out.flush()) {
            throw ContractError("short write to '" + tmp + "'");
        }
    }
    fs::rename(tmp, path);
}

void write_pgm(const std::string& path, const Image& image) {
    std::string data = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
    for (double v : image.px) {
        data.push_back(static_cast<char>(to_byte(v)));
    }
    write_text_atomic(path, data);
}

void write_ppm_grid(const std::string& path, std::span<const Image> images, std::size_t columns) {
    require(!images.empty() && columns >= 1, "write_ppm_grid: nothing to write");
    const std::size_t h = images[0].height, w = images[0].width;
    const std::size_t rows = (images.size() + columns - 1) / columns;
    const std::size_t gap = 1;
    const std::size_t W = columns * (w + gap) - gap, H = rows * (h + gap) - gap;
    std::vector<unsigned char> px(W * H * 3, 0);
    for (std::size_t k = 0; k < images.size(); ++k) {
        require(images[k].height == h && images[k].width == w, "write_ppm_grid: mixed image sizes");
        const std::size_t oy = (k / columns) * (h + gap), ox = (k % columns) * (w + gap);
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                const unsigned char b = to_byte(images[k].at(r, c));
                unsigned char* dst = &px[((oy + r) * W + ox + c) * 3];
                dst[0] = dst[1] = dst[2] = b;
            }
        }
    }
    std::string data = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    data.append(reinterpret_cast<const char*>(px.data()), px.size());
    write_text_atomic(path, data);
}

std::vector<std::string> export_metrics(const std::string& run_dir) {
    if (!fs::is_directory(run_dir)) {
        throw NotFoundError("run directory '" + run_dir + "' not found");
    }
    const std::string ckpt_path = (fs::path(run_dir) / kCheckpointFile).string();
    const Checkpoint c = load_checkpoint(ckpt_path);
    const RunMetrics m = metrics_from_checkpoint(c);
    const std::string csv = (fs::path(run_dir) / kMetricsFile).string();
    const std::string sum = (fs::path(run_dir) / kSummaryFile).string();
    write_text_atomic(csv, metrics_csv(m));
    write_text_atomic(sum, summary_json(m, c.step, hex(c.config_digest)));
    return {csv, sum};
}

RunLock::RunLock(const std::string& dir) : path_((fs::path(dir) / kLockFile).string()) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        throw ContractError("run directory '" + dir + "' is locked by another writer (remove " + path_ +
                            " if stale)");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

}  // namespace divctl
