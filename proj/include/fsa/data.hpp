#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsa/image_io.hpp"
#include "fsa/postprocess.hpp"
#include "fsa/tensor.hpp"

namespace fsa {

// One labeled object, YOLO convention: normalized center/size in [0,1].
struct GroundTruth {
    int class_id = 0;
    float cx = 0, cy = 0, w = 0, h = 0;
};

GroundTruthBox to_pixel_box(const GroundTruth& gt, int image_size);

// Synthetic "indoor device" scene knobs. Same seed, same scenes, bit for bit.
struct SceneSpec {
    int image_size = 160;
    int min_devices = 1;
    int max_devices = 3;
    float scale_min = 0.08f; // device extent as a fraction of the image
    float scale_max = 0.35f;
    float tiny_min = 0.02f; // tiny tier, exercises the stride-4 head
    float tiny_max = 0.06f;
    float tiny_fraction = 0.3f; // chance an object is drawn from the tiny tier
    float clutter_density = 0.5f;
    float light_jitter = 0.25f;
    int num_classes = 3;
    uint64_t seed = 0;

    void validate() const;
    static SceneSpec from_file(const std::string& path);
};

struct Sample {
    std::string stem;
    Tensor image; // (3,S,S), values in [0,1]
    std::vector<GroundTruth> labels;
};

struct Dataset {
    std::vector<Sample> samples;
    std::vector<std::string> class_names;
    int num_classes() const { return static_cast<int>(class_names.size()); }
};

// Renders `count` scenes into out_dir: images/*.ppm, labels/*.txt and
// classes.txt (one name per line).
void generate(const SceneSpec& spec, int count, const std::string& out_dir);

// Pairs images with labels by filename stem; empty directory yields an empty
// dataset. Malformed label lines fail with file+line diagnostics.
Dataset load_dataset(const std::string& dir);

// In-memory render of a single scene, used by generate() and tests.
ImageU8 render_scene(const SceneSpec& spec, uint64_t image_index, std::vector<GroundTruth>& labels);

// (3,H,W) float tensor in [0,1]
Tensor image_to_tensor(const ImageU8& img);

std::vector<std::string> default_class_names(int num_classes);

} // namespace fsa
