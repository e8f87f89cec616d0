#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <omp.h>

#include "fsa/data.hpp"
#include "fsa/gradcheck.hpp"
#include "fsa/metrics.hpp"
#include "fsa/model.hpp"
#include "fsa/train.hpp"

namespace fs = std::filesystem;
using namespace fsa;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUser = 1;
constexpr int kExitInternal = 2;
constexpr int kExitVerify = 3;

void apply_thread_cap() {
    if (const char* env = std::getenv("FSA_THREADS")) {
        const int want = std::atoi(env);
        if (want >= 1) omp_set_num_threads(std::min(want, omp_get_max_threads()));
    }
}

ModelConfig load_model_config(const std::string& path, bool* anchors_pinned) {
    if (anchors_pinned) *anchors_pinned = false;
    if (path.empty()) return ModelConfig{};
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    if (anchors_pinned) *anchors_pinned = text.find("anchors_p") != std::string::npos;
    return ModelConfig::from_text(text);
}

std::vector<GroundTruthBox> all_pixel_boxes(const Dataset& ds, int input_size) {
    std::vector<GroundTruthBox> out;
    for (const Sample& s : ds.samples)
        for (const GroundTruth& gt : s.labels) out.push_back(to_pixel_box(gt, input_size));
    return out;
}

void draw_box(ImageU8& img, const DetBox& b) {
    const uint8_t color[3][3] = {{255, 64, 64}, {64, 255, 64}, {96, 96, 255}};
    const uint8_t* c = color[b.class_id % 3];
    const int x0 = std::clamp(static_cast<int>(std::lround(b.cx - b.w / 2)), 0, img.width - 1);
    const int x1 = std::clamp(static_cast<int>(std::lround(b.cx + b.w / 2)), 0, img.width - 1);
    const int y0 = std::clamp(static_cast<int>(std::lround(b.cy - b.h / 2)), 0, img.height - 1);
    const int y1 = std::clamp(static_cast<int>(std::lround(b.cy + b.h / 2)), 0, img.height - 1);
    auto put = [&](int x, int y) {
        uint8_t* p = img.at(x, y);
        p[0] = c[0];
        p[1] = c[1];
        p[2] = c[2];
    };
    for (int x = x0; x <= x1; ++x) {
        put(x, y0);
        put(x, y1);
    }
    for (int y = y0; y <= y1; ++y) {
        put(x0, y);
        put(x1, y);
    }
}

// ---- subcommands -----------------------------------------------------------

int run_gen(const std::string& out_dir, int count, uint64_t seed, const std::string& spec_path) {
    SceneSpec spec;
    if (!spec_path.empty()) spec = SceneSpec::from_file(spec_path);
    spec.seed = seed;
    std::cout << "gen: out=" << out_dir << " n=" << count << " seed=" << seed
              << " image_size=" << spec.image_size << " classes=" << spec.num_classes
              << " devices=[" << spec.min_devices << "," << spec.max_devices << "]"
              << " tiny_fraction=" << spec.tiny_fraction << "\n";
    generate(spec, count, out_dir);
    std::cout << "wrote " << count << " scenes under " << out_dir << "\n";
    return kExitOk;
}

int run_train(const std::string& data_dir, const std::string& val_dir, const std::string& cfg_path,
              const std::string& out_ckpt, int epochs, uint64_t seed, TrainHyper hyper) {
    bool anchors_pinned = false;
    ModelConfig cfg = load_model_config(cfg_path, &anchors_pinned);

    Dataset train_set = load_dataset(data_dir);
    if (train_set.samples.empty()) throw IoError("no training images under " + data_dir);
    if (train_set.num_classes() != cfg.num_classes) {
        std::cout << "note: dataset has " << train_set.num_classes()
                  << " classes, overriding config num_classes=" << cfg.num_classes << "\n";
        cfg.num_classes = train_set.num_classes();
    }
    Dataset val_set;
    if (!val_dir.empty()) val_set = load_dataset(val_dir);

    if (!anchors_pinned) {
        cfg.anchors = kmeans_anchors(all_pixel_boxes(train_set, cfg.input_size), cfg.num_heads());
        std::cout << "anchors: k-means over " << train_set.samples.size() << " training images\n";
    }
    cfg.validate();

    hyper.epochs = epochs;
    hyper.seed = seed;

    std::cout << "train: data=" << data_dir << " out=" << out_ckpt << " epochs=" << epochs
              << " seed=" << seed << " batch=" << hyper.batch_size << " lr0=" << hyper.lr0
              << " lrf=" << hyper.lrf << " momentum=" << hyper.momentum
              << " weight_decay=" << hyper.weight_decay << " warmup=" << hyper.warmup_epochs
              << " eval_interval=" << hyper.eval_interval << "\n";
    std::cout << "model config:\n" << cfg.to_text();

    Model model = Model::build(cfg, seed);
    std::cout << "parameters: " << model.parameter_count() << "\n";

    std::ofstream log_file(out_ckpt + ".log");
    if (!log_file) throw IoError("cannot write training log next to " + out_ckpt);

    struct Tee : std::ostream, std::streambuf {
        std::ostream &a, &b;
        Tee(std::ostream& a_, std::ostream& b_) : std::ostream(this), a(a_), b(b_) {}
        int overflow(int c) override {
            if (c != EOF) {
                a.put(static_cast<char>(c));
                b.put(static_cast<char>(c));
            }
            return c;
        }
    } tee(std::cout, log_file);

    train(model, train_set, val_set.samples.empty() ? nullptr : &val_set, hyper, &tee);
    model.save(out_ckpt);
    std::cout << "saved checkpoint to " << out_ckpt << "\n";
    return kExitOk;
}

int run_eval(const std::string& data_dir, const std::string& ckpt, float conf, float nms_thr,
             const std::string& csv_path) {
    std::cout << "eval: data=" << data_dir << " ckpt=" << ckpt << " conf=" << conf
              << " nms=" << nms_thr << "\n";
    Model model = Model::load(ckpt);
    Dataset ds = load_dataset(data_dir);
    if (ds.samples.empty()) throw IoError("no images under " + data_dir);
    EvalReport rep = evaluate(model, ds, conf, nms_thr);

    std::cout << rep.to_text();
    std::cout << "Precision (%) & Recall (%) & map@0.5 (%) & map@0.5:0.95 (%)\n";
    char row[160];
    std::snprintf(row, sizeof(row), "%.2f & %.2f & %.2f & %.2f\n", 100.0 * rep.precision,
                  100.0 * rep.recall, 100.0 * rep.map50, 100.0 * rep.map5095);
    std::cout << row;

    std::ofstream csv(csv_path);
    if (!csv) throw IoError("cannot write " + csv_path);
    csv << EvalReport::csv_header() << '\n' << rep.to_csv_row() << '\n';
    std::cout << "wrote " << csv_path << "\n";
    return kExitOk;
}

int run_detect(const std::string& image_path, const std::string& ckpt, float conf, float nms_thr,
               const std::string& out_dir, const std::string& attn_dir) {
    std::cout << "detect: image=" << image_path << " ckpt=" << ckpt << " conf=" << conf
              << " nms=" << nms_thr << "\n";
    Model model = Model::load(ckpt);
    ImageU8 img = read_ppm(image_path);
    const int S = model.config().input_size;
    if (img.width != S || img.height != S)
        throw IoError(image_path + ": image is " + std::to_string(img.width) + "x" +
                      std::to_string(img.height) + ", this checkpoint expects " + std::to_string(S) +
                      "x" + std::to_string(S));

    std::vector<Tensor> attn_maps;
    std::vector<DetBox> boxes = detect_image(model, image_to_tensor(img), conf, nms_thr,
                                             attn_dir.empty() ? nullptr : &attn_maps);

    const fs::path base = out_dir.empty() ? fs::path(image_path).parent_path() : fs::path(out_dir);
    fs::create_directories(base);
    const std::string stem = fs::path(image_path).stem().string();

    const fs::path txt = base / (stem + "_detections.txt");
    std::ofstream tf(txt);
    if (!tf) throw IoError("cannot write " + txt.string());
    for (const DetBox& b : boxes) {
        char line[160];
        std::snprintf(line, sizeof(line), "%d %.4f %.2f %.2f %.2f %.2f\n", b.class_id, b.confidence,
                      b.cx, b.cy, b.w, b.h);
        tf << line;
    }
    std::cout << boxes.size() << " detections -> " << txt.string() << "\n";

    ImageU8 annotated = img;
    for (const DetBox& b : boxes) draw_box(annotated, b);
    const fs::path ann = base / (stem + "_annotated.ppm");
    write_ppm(ann.string(), annotated);
    std::cout << "annotated image -> " << ann.string() << "\n";

    if (!attn_dir.empty()) {
        fs::create_directories(attn_dir);
        const std::vector<int> strides = model.config().strides();
        for (size_t i = 0; i < attn_maps.size(); ++i) {
            const Tensor& a = attn_maps[i]; // (1,C,H,W)
            const int C = a.dim(1), H = a.dim(2), W = a.dim(3);
            std::vector<uint8_t> gray(static_cast<size_t>(H) * W);
            for (int64_t px = 0; px < static_cast<int64_t>(H) * W; ++px) {
                double acc = 0;
                for (int ch = 0; ch < C; ++ch)
                    acc += a.data()[static_cast<size_t>(ch * H * W + px)];
                // round half to even, so 0.5 quantizes to 128
                gray[static_cast<size_t>(px)] = static_cast<uint8_t>(
                    std::nearbyint(255.0 * acc / C));
            }
            const fs::path ap =
                fs::path(attn_dir) / (stem + "_attn_s" + std::to_string(strides[i]) + ".ppm");
            write_gray_ppm(ap.string(), W, H, gray);
            std::cout << "attention map -> " << ap.string() << "\n";
        }
    }
    return kExitOk;
}

int run_gradcheck(uint64_t seed) {
    std::cout << "gradcheck: seed=" << seed << " step=1e-3 tolerance=1e-3\n";
    const auto t0 = std::chrono::steady_clock::now();
    const auto reports = run_gradient_checks(seed);
    bool ok = true;
    for (const FdReport& r : reports) {
        std::printf("%-28s %s  max_rel=%.3e\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                    r.max_rel);
        ok &= r.pass;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%zu checks, %s, %.1fs\n", reports.size(), ok ? "all passed" : "FAILURES", secs);
    return ok ? kExitOk : kExitVerify;
}

int run_bench(const std::string& cfg_path, int iters) {
    ModelConfig cfg = load_model_config(cfg_path, nullptr);
    std::cout << "bench: iters=" << iters << " input=" << cfg.input_size << "\n"
              << cfg.to_text();
    Model model = Model::build(cfg, 0);
    Rng rng(123);
    std::vector<float> v(static_cast<size_t>(3) * cfg.input_size * cfg.input_size);
    for (float& x : v) x = rng.uniform(0, 1);
    Tensor img({1, 3, cfg.input_size, cfg.input_size}, std::move(v));

    NoGradGuard ng;
    model.forward(img, false); // warmup
    std::vector<double> times;
    std::vector<std::pair<std::string, double>> sections_acc;
    for (int i = 0; i < iters; ++i) {
        std::vector<std::pair<std::string, double>> sections;
        const auto t0 = std::chrono::steady_clock::now();
        model.forward(img, false, nullptr, &sections);
        times.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        if (sections_acc.empty()) sections_acc = sections;
        else
            for (size_t s = 0; s < sections.size(); ++s) sections_acc[s].second += sections[s].second;
    }
    std::sort(times.begin(), times.end());
    const double median = times[times.size() / 2];
    std::printf("forward median: %.2f ms over %d iters\n", 1e3 * median, iters);
    for (const auto& [name, secs] : sections_acc)
        std::printf("  %-10s %8.2f ms/iter\n", name.c_str(), 1e3 * secs / iters);
    std::cout << "threads: " << omp_get_max_threads()
              << " (kernel-level serial-vs-parallel comparison: see the kernel_bench tool)\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    apply_thread_cap();
    CLI::App app{"fsadet: a small anchor-based detector with full-separation attention"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "render a synthetic labeled dataset");
    std::string gen_out, gen_spec;
    int gen_n = 16;
    uint64_t gen_seed = 0;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--n", gen_n, "number of images")->required();
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--spec", gen_spec, "scene spec file (key = value)");

    // train
    auto* tr = app.add_subcommand("train", "train a detector");
    std::string tr_data, tr_val, tr_cfg, tr_out;
    int tr_epochs = 120;
    uint64_t tr_seed = 0;
    TrainHyper hyper;
    tr->add_option("--data", tr_data, "training dataset directory")->required();
    tr->add_option("--out", tr_out, "checkpoint output path")->required();
    tr->add_option("--val", tr_val, "validation dataset directory");
    tr->add_option("--config", tr_cfg, "model config file");
    tr->add_option("--epochs", tr_epochs, "training epochs");
    tr->add_option("--seed", tr_seed, "training seed");
    tr->add_option("--batch", hyper.batch_size, "batch size");
    tr->add_option("--lr0", hyper.lr0, "peak learning rate");
    tr->add_option("--lrf", hyper.lrf, "final learning rate fraction");
    tr->add_option("--eval-interval", hyper.eval_interval, "evaluate every k epochs");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string ev_data, ev_ckpt, ev_csv = "eval.csv";
    float ev_conf = 0.25f, ev_nms = 0.45f;
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--conf", ev_conf, "precision/recall operating confidence");
    ev->add_option("--nms", ev_nms, "NMS IoU threshold");
    ev->add_option("--csv", ev_csv, "CSV output path");

    // detect
    auto* de = app.add_subcommand("detect", "run detection on one image");
    std::string de_img, de_ckpt, de_out, de_attn;
    float de_conf = 0.25f, de_nms = 0.45f;
    de->add_option("--image", de_img, "input PPM image")->required();
    de->add_option("--ckpt", de_ckpt, "checkpoint path")->required();
    de->add_option("--conf", de_conf, "confidence threshold");
    de->add_option("--nms", de_nms, "NMS IoU threshold");
    de->add_option("--out", de_out, "output directory (default: next to the image)");
    de->add_option("--dump-attention", de_attn, "directory for FSA attention map dumps");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference verification suite");
    uint64_t gc_seed = 42;
    gc->add_option("--seed", gc_seed, "suite seed");

    // bench
    auto* be = app.add_subcommand("bench", "forward latency benchmark");
    std::string be_cfg;
    int be_iters = 10;
    be->add_option("--config", be_cfg, "model config file");
    be->add_option("--iters", be_iters, "iterations");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUser;
    }

    try {
        if (gen->parsed()) return run_gen(gen_out, gen_n, gen_seed, gen_spec);
        if (tr->parsed()) return run_train(tr_data, tr_val, tr_cfg, tr_out, tr_epochs, tr_seed, hyper);
        if (ev->parsed()) return run_eval(ev_data, ev_ckpt, ev_conf, ev_nms, ev_csv);
        if (de->parsed()) return run_detect(de_img, de_ckpt, de_conf, de_nms, de_out, de_attn);
        if (gc->parsed()) return run_gradcheck(gc_seed);
        if (be->parsed()) return run_bench(be_cfg, be_iters);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUser;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUser;
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUser;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitInternal;
    }
    return kExitUser;
}
