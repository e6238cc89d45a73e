#pragma once

// Two-domain synthetic echocardiogram-like benchmark: four elliptic
// "chambers" in fixed quadrants whose areas oscillate over a cycle, viewed
// through a site-dependent acquisition model (gamma curve, multiplicative
// speckle, sector cone, axis anisotropy). Ground-truth masks come from the
// noiseless geometry.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace graphecho {

constexpr int kNumClasses = 5;  // 0 background, 1 LV, 2 RV, 3 LA, 4 RA

struct SiteParams {
    double gamma = 1.0;            // contrast exponent, > 0
    double speckle_sigma = 0.1;    // multiplicative noise level, >= 0
    double cone_angle_deg = 50.0;  // sector half-angle, [10, 60]
    double aniso_x = 1.0;          // horizontal scale
    double aniso_y = 1.0;          // vertical scale
    std::array<double, kNumClasses> base_intensity{0.55, 0.10, 0.18, 0.14, 0.24};

    void validate() const;
};

struct VideoSample {
    std::string id;
    char domain = 'A';  // 'A' or 'B'
    int height = 0, width = 0;
    int period = 0;                    // frames per cycle
    std::vector<int> labeled_frames;   // 5 for training videos, all for eval
    std::vector<std::vector<float>> frames;   // per frame, H*W values in [0,1]
    std::vector<std::vector<uint8_t>> masks;  // per frame, H*W class ids 0..4

    int num_frames() const { return int(frames.size()); }
};

VideoSample generate_video(const SiteParams& site, uint64_t seed, int num_frames, int height,
                           int width, int period = 20, char domain = 'A');

// 5 equally spaced frame indices including both endpoints
std::vector<int> equally_spaced_labels(int num_frames, int count = 5);

struct GenConfig {
    uint64_t seed = 7;
    int videos_per_domain = 40;
    int num_frames = 40;
    int height = 64, width = 64;
    int period = 20;
    SiteParams site_a;
    SiteParams site_b;
    double domain_gap_floor = 0.02;  // minimum chi-square histogram distance
    int jobs = 1;

    GenConfig();  // fills the default two-site acquisition gap
};

struct DatasetSummary {
    int train_src = 0, train_tgt = 0, val = 0, test = 0;
    double domain_gap_chi2 = 0.0;
};

// Writes <root>/{train_src,train_tgt,val,test}/<video_id>/{frames,masks,meta.txt}.
// Training videos carry 5 labeled frames; val/test videos are fully labeled.
DatasetSummary make_dataset(const GenConfig& config, const std::string& root, bool force = false);

// Loads every video directly under `dir` (one split), sorted by id.
std::vector<VideoSample> load_dataset(const std::string& dir);

// chi-square distance between pixel intensity histograms of two video sets
double domain_gap_chi2(const std::vector<VideoSample>& a, const std::vector<VideoSample>& b,
                       int bins = 64);

void write_video(const VideoSample& v, const std::string& video_dir);
VideoSample load_video(const std::string& video_dir);

}  // namespace graphecho
