#include "graphecho/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "graphecho/error.hpp"
#include "graphecho/pgm.hpp"
#include "graphecho/rng.hpp"

namespace fs = std::filesystem;

namespace graphecho {

void SiteParams::validate() const {
    if (gamma <= 0.0) throw ConfigError("site: gamma must be > 0");
    if (speckle_sigma < 0.0) throw ConfigError("site: speckle_sigma must be >= 0");
    if (cone_angle_deg < 10.0 || cone_angle_deg > 60.0)
        throw ConfigError("site: cone_angle must be within [10, 60] degrees");
    if (aniso_x <= 0.0 || aniso_y <= 0.0) throw ConfigError("site: anisotropy must be > 0");
    for (double b : base_intensity)
        if (b < 0.0 || b > 1.0) throw ConfigError("site: base intensity outside [0,1]");
}

GenConfig::GenConfig() {
    site_a.gamma = 0.85;
    site_a.speckle_sigma = 0.10;
    site_a.cone_angle_deg = 52.0;
    site_a.aniso_x = 1.0;
    site_a.aniso_y = 1.0;
    site_a.base_intensity = {0.58, 0.10, 0.20, 0.14, 0.26};

    site_b.gamma = 1.9;
    site_b.speckle_sigma = 0.22;
    site_b.cone_angle_deg = 38.0;
    site_b.aniso_x = 1.14;
    site_b.aniso_y = 0.88;
    site_b.base_intensity = {0.70, 0.16, 0.30, 0.22, 0.38};
}

namespace {

struct Chamber {
    double cx, cy;    // centre, unit coords
    double rx, ry;    // base radii, unit coords
    double phase;     // area oscillation phase
};

// Fixed quadrant layout. Class 1 runs on a pure cosine so its area series is
// symmetric around the cycle midpoint; atria are in anti-phase with the
// ventricles.
constexpr double kPi = 3.14159265358979323846;
const Chamber kChambers[4] = {
    {0.36, 0.46, 0.115, 0.125, kPi / 2},         // LV
    {0.65, 0.44, 0.095, 0.105, kPi / 2 + 0.45},  // RV
    {0.37, 0.76, 0.085, 0.080, 3 * kPi / 2},     // LA
    {0.66, 0.75, 0.090, 0.078, 3 * kPi / 2 + 0.45},  // RA
};
constexpr double kAreaAmp = 0.24;  // relative radius oscillation

constexpr double kConeApexX = 0.5;
constexpr double kConeApexY = 0.02;
constexpr double kConeRadius = 0.97;

bool inside_cone(double x, double y, double half_angle_rad) {
    const double dx = x - kConeApexX, dy = y - kConeApexY;
    if (dy <= 0.0) return false;
    if (std::hypot(dx, dy) > kConeRadius) return false;
    return std::atan2(std::abs(dx), dy) <= half_angle_rad;
}

double radius_scale(const Chamber& c, int phase_index, int period) {
    return 1.0 + kAreaAmp * std::sin(2.0 * kPi * double(phase_index) / double(period) + c.phase);
}

// noiseless class mask for one cycle phase
void render_mask(std::vector<uint8_t>& mask, int H, int W, const SiteParams& site,
                 int phase_index, int period, const double* radius_jitter) {
    const double half_angle = site.cone_angle_deg * kPi / 180.0;
    std::fill(mask.begin(), mask.end(), uint8_t(0));
    for (int cls = 1; cls <= 4; ++cls) {
        const Chamber& ch = kChambers[cls - 1];
        const double s = radius_scale(ch, phase_index, period) * radius_jitter[cls - 1];
        const double rx = ch.rx * s * site.aniso_x;
        const double ry = ch.ry * s * site.aniso_y;
        const int y0 = std::max(0, int((ch.cy - ry) * H) - 1);
        const int y1 = std::min(H - 1, int((ch.cy + ry) * H) + 1);
        const int x0 = std::max(0, int((ch.cx - rx) * W) - 1);
        const int x1 = std::min(W - 1, int((ch.cx + rx) * W) + 1);
        for (int y = y0; y <= y1; ++y) {
            const double py = (y + 0.5) / H;
            for (int x = x0; x <= x1; ++x) {
                const double px = (x + 0.5) / W;
                const double u = (px - ch.cx) / rx, v = (py - ch.cy) / ry;
                if (u * u + v * v > 1.0) continue;
                if (!inside_cone(px, py, half_angle)) continue;
                if (mask[size_t(y) * W + x] == 0) mask[size_t(y) * W + x] = uint8_t(cls);
            }
        }
    }
}

}  // namespace

std::vector<int> equally_spaced_labels(int num_frames, int count) {
    std::vector<int> idx(size_t(count));
    for (int i = 0; i < count; ++i) idx[size_t(i)] = i * (num_frames - 1) / (count - 1);
    return idx;
}

VideoSample generate_video(const SiteParams& site, uint64_t seed, int num_frames, int height,
                           int width, int period, char domain) {
    site.validate();
    if (period < 2) throw ConfigError("generate_video: period must be >= 2");
    if (num_frames < 2 * period)
        throw ConfigError("generate_video: need at least two cycles, T >= 2*period");
    if (height < 32 || width < 32) throw ConfigError("generate_video: H, W must be >= 32");

    // degenerate-geometry retry: grow radii if a chamber collapses below 4 px
    double jitter[4] = {1.0, 1.0, 1.0, 1.0};
    Rng jitter_rng(hash_seed(seed, 0xD15C));
    bool ok = false;
    for (int attempt = 0; attempt < 10 && !ok; ++attempt) {
        ok = true;
        for (int c = 0; c < 4; ++c) {
            const double smin = (1.0 - kAreaAmp) * jitter[c];
            const double area = kPi * kChambers[c].rx * smin * site.aniso_x * width *
                                kChambers[c].ry * smin * site.aniso_y * height;
            if (area < 4.0) {
                ok = false;
                jitter[c] *= 1.0 + 0.1 * (1.0 + jitter_rng.uniform());
            }
        }
    }
    if (!ok) throw ConfigError("generate_video: chamber geometry degenerate after 10 retries");

    VideoSample v;
    v.domain = domain;
    v.height = height;
    v.width = width;
    v.period = period;
    v.frames.resize(size_t(num_frames));
    v.masks.resize(size_t(num_frames));

    const int hw = height * width;
    const double half_angle = site.cone_angle_deg * kPi / 180.0;

    // masks depend only on the cycle phase, which makes periodicity exact
    std::vector<std::vector<uint8_t>> phase_masks(size_t(period));
    for (int p = 0; p < period; ++p) {
        phase_masks[size_t(p)].resize(size_t(hw));
        render_mask(phase_masks[size_t(p)], height, width, site, p, period, jitter);
    }

    std::vector<uint8_t> cone(size_t(hw));
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            cone[size_t(y) * width + x] =
                inside_cone((x + 0.5) / width, (y + 0.5) / height, half_angle) ? 1 : 0;

    for (int t = 0; t < num_frames; ++t) {
        const auto& mask = phase_masks[size_t(t % period)];
        v.masks[size_t(t)] = mask;
        auto& frame = v.frames[size_t(t)];
        frame.resize(size_t(hw));
        Rng noise(hash_seed(seed, 0x10000 + uint64_t(t)));
        for (int i = 0; i < hw; ++i) {
            if (!cone[size_t(i)]) {
                frame[size_t(i)] = 0.0f;
                continue;
            }
            double val = site.base_intensity[mask[size_t(i)]];
            val = std::pow(val, site.gamma);
            if (site.speckle_sigma > 0.0) val *= 1.0 + site.speckle_sigma * noise.normal();
            val = std::clamp(val, 0.0, 1.0);
            // quantize to the 8-bit storage grid so disk round-trips are exact
            frame[size_t(i)] = float(std::lround(val * 255.0) / 255.0);
        }
    }
    return v;
}

// --- on-disk format ---------------------------------------------------------

void write_video(const VideoSample& v, const std::string& video_dir) {
    fs::create_directories(fs::path(video_dir) / "frames");
    fs::create_directories(fs::path(video_dir) / "masks");
    char name[32];
    std::vector<uint8_t> buf(size_t(v.height) * v.width);
    for (int t = 0; t < v.num_frames(); ++t) {
        std::snprintf(name, sizeof(name), "%04d.pgm", t);
        for (size_t i = 0; i < buf.size(); ++i)
            buf[i] = uint8_t(std::lround(std::clamp(double(v.frames[size_t(t)][i]), 0.0, 1.0) * 255.0));
        write_pgm((fs::path(video_dir) / "frames" / name).string(), buf.data(), v.height, v.width);
        write_pgm((fs::path(video_dir) / "masks" / name).string(), v.masks[size_t(t)].data(),
                  v.height, v.width);
    }
    std::ofstream meta(fs::path(video_dir) / "meta.txt");
    if (!meta) throw IoError("cannot write " + video_dir + "/meta.txt");
    meta << "domain=" << v.domain << "\n";
    meta << "period=" << v.period << "\n";
    meta << "labeled=";
    for (size_t i = 0; i < v.labeled_frames.size(); ++i)
        meta << (i ? "," : "") << v.labeled_frames[i];
    meta << "\n";
}

VideoSample load_video(const std::string& video_dir) {
    VideoSample v;
    v.id = fs::path(video_dir).filename().string();

    const std::string meta_path = (fs::path(video_dir) / "meta.txt").string();
    std::ifstream meta(meta_path);
    if (!meta) throw IoError("missing " + meta_path);
    std::string line;
    while (std::getline(meta, line)) {
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError(meta_path + ": malformed line '" + line + "'");
        const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "domain") {
            if (val != "A" && val != "B") throw IoError(meta_path + ": bad domain '" + val + "'");
            v.domain = val[0];
        } else if (key == "period") {
            v.period = std::stoi(val);
        } else if (key == "labeled") {
            std::istringstream ss(val);
            std::string tok;
            while (std::getline(ss, tok, ',')) v.labeled_frames.push_back(std::stoi(tok));
        } else {
            throw IoError(meta_path + ": unknown key '" + key + "'");
        }
    }
    if (v.period <= 0) throw IoError(meta_path + ": missing period");

    std::vector<std::string> frame_files, mask_files;
    for (const auto& e : fs::directory_iterator(fs::path(video_dir) / "frames"))
        if (e.path().extension() == ".pgm") frame_files.push_back(e.path().string());
    for (const auto& e : fs::directory_iterator(fs::path(video_dir) / "masks"))
        if (e.path().extension() == ".pgm") mask_files.push_back(e.path().string());
    std::sort(frame_files.begin(), frame_files.end());
    std::sort(mask_files.begin(), mask_files.end());
    if (frame_files.empty()) throw IoError(video_dir + ": no frames");
    if (frame_files.size() != mask_files.size())
        throw IoError(video_dir + ": frame/mask count mismatch (" +
                      std::to_string(frame_files.size()) + " vs " +
                      std::to_string(mask_files.size()) + ")");

    for (size_t t = 0; t < frame_files.size(); ++t) {
        PgmImage f = read_pgm(frame_files[t]);
        PgmImage m = read_pgm(mask_files[t]);
        if (t == 0) {
            v.height = f.height;
            v.width = f.width;
        }
        if (f.height != v.height || f.width != v.width)
            throw IoError(frame_files[t] + ": frame shape mismatch");
        if (m.height != v.height || m.width != v.width)
            throw IoError(mask_files[t] + ": mask shape mismatch");
        std::vector<float> frame(f.pixels.size());
        for (size_t i = 0; i < f.pixels.size(); ++i) frame[i] = float(f.pixels[i] / 255.0);
        for (size_t i = 0; i < m.pixels.size(); ++i)
            if (m.pixels[i] >= kNumClasses)
                throw IoError(mask_files[t] + ": unknown class id " +
                              std::to_string(int(m.pixels[i])));
        v.frames.push_back(std::move(frame));
        v.masks.emplace_back(m.pixels.begin(), m.pixels.end());
    }
    for (int idx : v.labeled_frames)
        if (idx < 0 || idx >= v.num_frames())
            throw IoError(meta_path + ": labeled index " + std::to_string(idx) + " out of range");
    return v;
}

std::vector<VideoSample> load_dataset(const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError("dataset directory missing: " + dir);
    std::vector<std::string> video_dirs;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) video_dirs.push_back(e.path().string());
    std::sort(video_dirs.begin(), video_dirs.end());
    if (video_dirs.empty()) throw IoError("empty dataset directory: " + dir);
    std::vector<VideoSample> out;
    out.reserve(video_dirs.size());
    for (const auto& d : video_dirs) out.push_back(load_video(d));
    return out;
}

double domain_gap_chi2(const std::vector<VideoSample>& a, const std::vector<VideoSample>& b,
                       int bins) {
    auto histogram = [bins](const std::vector<VideoSample>& vs) {
        std::vector<double> h(size_t(bins), 0.0);
        double total = 0.0;
        for (const auto& v : vs)
            for (const auto& f : v.frames)
                for (float px : f) {
                    int bin = std::min(bins - 1, int(px * bins));
                    h[size_t(bin)] += 1.0;
                    total += 1.0;
                }
        for (double& x : h) x /= total;
        return h;
    };
    const auto ha = histogram(a), hb = histogram(b);
    double chi2 = 0.0;
    for (int i = 0; i < bins; ++i) {
        const double s = ha[size_t(i)] + hb[size_t(i)];
        if (s > 0.0) chi2 += (ha[size_t(i)] - hb[size_t(i)]) * (ha[size_t(i)] - hb[size_t(i)]) / s;
    }
    return 0.5 * chi2;
}

namespace {

std::set<int> classes_present(const VideoSample& v, const std::vector<int>& frames) {
    std::set<int> cls;
    for (int t : frames)
        for (uint8_t c : v.masks[size_t(t)])
            if (c > 0) cls.insert(int(c));
    return cls;
}

// labeled frames must cover every class that appears anywhere in the video
void assign_training_labels(VideoSample& v) {
    std::vector<int> all(size_t(v.num_frames()));
    for (int t = 0; t < v.num_frames(); ++t) all[size_t(t)] = t;
    const std::set<int> want = classes_present(v, all);
    std::vector<int> idx = equally_spaced_labels(v.num_frames());
    for (int shift = 0; shift < v.num_frames(); ++shift) {
        std::vector<int> shifted;
        for (int i : idx) shifted.push_back((i + shift) % v.num_frames());
        std::sort(shifted.begin(), shifted.end());
        if (classes_present(v, shifted) == want) {
            v.labeled_frames = shifted;
            return;
        }
    }
    throw ConfigError("dataset: no labeled-frame placement covers all classes in video " + v.id);
}

}  // namespace

DatasetSummary make_dataset(const GenConfig& config, const std::string& root, bool force) {
    config.site_a.validate();
    config.site_b.validate();
    if (config.videos_per_domain < 10)
        throw ConfigError("dataset: need at least 10 videos per domain for an 8:1:1 split");
    if (fs::exists(root) && !fs::is_empty(root)) {
        if (!force) throw IoError("output directory not empty: " + root + " (use --force)");
        fs::remove_all(root);
    }
    fs::create_directories(root);

    const int n = config.videos_per_domain;
    const int n_train = n * 8 / 10;
    const int n_val = (n - n_train) / 2;

    struct Job {
        char domain;
        int index;
        std::string split;
        bool full_labels;
    };
    std::vector<Job> jobs;
    for (int d = 0; d < 2; ++d) {
        const char domain = d == 0 ? 'A' : 'B';
        for (int i = 0; i < n; ++i) {
            std::string split;
            bool full = false;
            if (i < n_train) {
                split = domain == 'A' ? "train_src" : "train_tgt";
            } else if (i < n_train + n_val) {
                split = "val";
                full = true;
            } else {
                split = "test";
                full = true;
            }
            jobs.push_back({domain, i, split, full});
        }
    }

    std::vector<VideoSample> generated(jobs.size());
    auto run_job = [&](size_t j) {
        const Job& job = jobs[j];
        const SiteParams& site = job.domain == 'A' ? config.site_a : config.site_b;
        // per-video seed derived by hashing so parallel generation is bitwise
        // identical to serial generation
        const uint64_t vseed =
            hash_seed(config.seed, uint64_t(job.index) + (job.domain == 'B' ? 1u << 20 : 0u));
        VideoSample v = generate_video(site, vseed, config.num_frames, config.height,
                                       config.width, config.period, job.domain);
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "%c_%04d", job.domain, job.index);
        v.id = idbuf;
        if (job.full_labels) {
            v.labeled_frames.resize(size_t(v.num_frames()));
            for (int t = 0; t < v.num_frames(); ++t) v.labeled_frames[size_t(t)] = t;
        } else {
            assign_training_labels(v);
        }
        generated[j] = std::move(v);
    };

    if (config.jobs > 1) {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int w = 0; w < config.jobs; ++w)
            pool.emplace_back([&] {
                for (size_t j = next.fetch_add(1); j < jobs.size(); j = next.fetch_add(1))
                    run_job(j);
            });
        for (auto& t : pool) t.join();
    } else {
        for (size_t j = 0; j < jobs.size(); ++j) run_job(j);
    }

    DatasetSummary summary;
    std::vector<VideoSample> train_a, train_b;
    for (size_t j = 0; j < jobs.size(); ++j) {
        const Job& job = jobs[j];
        write_video(generated[j], (fs::path(root) / job.split / generated[j].id).string());
        if (job.split == "train_src") ++summary.train_src;
        else if (job.split == "train_tgt") ++summary.train_tgt;
        else if (job.split == "val") ++summary.val;
        else ++summary.test;
        if (job.split == "train_src") train_a.push_back(generated[j]);
        if (job.split == "train_tgt") train_b.push_back(generated[j]);
    }

    summary.domain_gap_chi2 = domain_gap_chi2(train_a, train_b);
    if (summary.domain_gap_chi2 < config.domain_gap_floor)
        throw ConfigError("dataset: domain gap chi2 " + std::to_string(summary.domain_gap_chi2) +
                          " below floor " + std::to_string(config.domain_gap_floor));
    return summary;
}

}  // namespace graphecho
