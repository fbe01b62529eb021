// Config JSON handling, checkpoint byte layout and error paths, metrics file
// behavior, and the headline property: resuming from a checkpoint reproduces
// an uninterrupted run bit for bit.

#include <gtest/gtest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>

#include "mugs/trainer.hpp"

namespace {

using namespace mugs;
namespace fs = std::filesystem;

TrainConfig tiny_config() {
    TrainConfig c;
    c.epochs = 2;
    c.batch_size = 8;
    c.seed = 13;
    c.warmup_epochs = 1;
    c.base_lr = 1e-3f;
    c.final_lr = 1e-4f;
    c.image_size_global = 16;
    c.image_size_local = 8;
    c.patch_size = 4;
    c.embed_dim = 16;
    c.depth = 1;
    c.num_heads = 2;
    c.mlp_ratio = 2.0f;
    c.drop_path_rate = 0.1f;
    c.head_hidden_dim = 16;
    c.head_out_dim = 8;
    c.pred_hidden_dim = 16;
    c.agg_depth = 1;
    c.k = 2;
    c.num_prototypes = 8;
    c.buffer_capacity = 16;
    c.local_crops = 2;
    c.tau_g_warmup_epochs = 1;
    c.checkpoint_every_epochs = 1;
    return c;
}

Dataset tiny_dataset() { return synth_hierarchical_dataset(5, 2, 2, 2, 2, 16); }

std::string temp_path(const std::string& name) {
    return (fs::temp_directory_path() / name).string();
}

std::vector<std::vector<float>> store_values(const ParamStore& ps) {
    std::vector<std::vector<float>> out;
    for (const auto& [name, t] : ps) out.push_back(t.data());
    return out;
}

// ---------------------------------------------------------------------------
// config JSON
// ---------------------------------------------------------------------------

TEST(ConfigJson, RoundTripPreservesEveryField) {
    TrainConfig c = tiny_config();
    c.dataset_dir = "some/dir";
    c.lambda_lg = 0.125f;
    TrainConfig back = TrainConfig::from_json(c.to_json());
    EXPECT_EQ(c.to_json(), back.to_json());
}

TEST(ConfigJson, UnknownKeyRejectedByName) {
    nlohmann::json j = tiny_config().to_json();
    j["leraning_rate"] = 0.1;  // a typo should fail loudly, not silently no-op
    try {
        TrainConfig::from_json(j);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("unknown key 'leraning_rate'"), std::string::npos)
            << e.what();
    }
}

TEST(ConfigJson, BadValueNamesTheKey) {
    nlohmann::json j = tiny_config().to_json();
    j["epochs"] = "many";
    try {
        TrainConfig::from_json(j);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("bad value for key 'epochs'"), std::string::npos)
            << e.what();
    }
}

TEST(ConfigJson, PartialFileKeepsDefaults) {
    const std::string path = temp_path("mugs_cfg_partial.json");
    {
        std::ofstream os(path);
        os << "{\"epochs\": 3, \"batch_size\": 4}\n";
    }
    TrainConfig c = TrainConfig::from_file(path);
    EXPECT_EQ(c.epochs, 3);
    EXPECT_EQ(c.batch_size, 4);
    TrainConfig d;
    EXPECT_EQ(c.embed_dim, d.embed_dim);  // untouched fields stay at defaults
    EXPECT_EQ(c.tau_in, d.tau_in);
    fs::remove(path);
}

TEST(ConfigJson, InvalidJsonAndMissingFile) {
    const std::string path = temp_path("mugs_cfg_broken.json");
    {
        std::ofstream os(path);
        os << "{not json";
    }
    EXPECT_THROW(TrainConfig::from_file(path), ConfigError);
    EXPECT_THROW(TrainConfig::from_file(path + ".does_not_exist"), ConfigError);
    fs::remove(path);
}

TEST(ConfigValidate, RejectsOutOfRangeCombinations) {
    TrainConfig c = tiny_config();
    c.config_version = 99;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_config();
    c.warmup_epochs = c.epochs;  // warmup must leave room for decay
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny_config();
    c.final_lr = c.base_lr * 2.0f;
    EXPECT_THROW(c.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// checkpoint files
// ---------------------------------------------------------------------------

TEST(Checkpoint, ByteLayoutMatchesDocumentedFormat) {
    Trainer t(tiny_config());
    t.attach_dataset(tiny_dataset());
    t.train_step({0, 1});
    const std::string path = temp_path("mugs_ckpt_layout.mgck");
    CheckpointData ckpt = t.to_checkpoint();
    save_checkpoint(ckpt, path);

    std::ifstream is(path, std::ios::binary);
    char magic[4];
    ASSERT_TRUE(is.read(magic, 4));
    EXPECT_EQ(std::string(magic, 4), "MGCK");
    auto rd32 = [&] {
        unsigned char b[4];
        is.read(reinterpret_cast<char*>(b), 4);
        return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
    };
    EXPECT_EQ(rd32(), 1u);  // version
    const uint32_t header_len = rd32();
    std::string header_bytes(header_len, '\0');
    ASSERT_TRUE(is.read(header_bytes.data(), header_len));
    nlohmann::json header = nlohmann::json::parse(header_bytes);
    EXPECT_EQ(header.at("format_version").get<int>(), 1);
    EXPECT_EQ(header.at("trainer").at("step").get<int64_t>(), 1);
    EXPECT_EQ(header.at("config").at("embed_dim").get<int64_t>(), 16);
    // table offsets are element counts, contiguous and in table order
    int64_t expect_offset = 0;
    for (const auto& entry : header.at("tensors")) {
        EXPECT_EQ(entry.at("offset").get<int64_t>(), expect_offset);
        expect_offset += entry.at("numel").get<int64_t>();
    }
    // payload is exactly 4 bytes per element after the header
    const auto file_size = static_cast<int64_t>(fs::file_size(path));
    EXPECT_EQ(file_size, 12 + static_cast<int64_t>(header_len) + 4 * expect_offset);
    fs::remove(path);
}

TEST(Checkpoint, RoundTripIsBitwise) {
    Trainer t(tiny_config());
    t.attach_dataset(tiny_dataset());
    t.train_step({0, 1});
    t.train_step({2, 3});
    CheckpointData a = t.to_checkpoint();
    const std::string path = temp_path("mugs_ckpt_roundtrip.mgck");
    save_checkpoint(a, path);
    CheckpointData b = load_checkpoint(path);
    EXPECT_EQ(b.step, a.step);
    EXPECT_EQ(b.epoch, a.epoch);
    EXPECT_EQ(b.adamw_step_count, a.adamw_step_count);
    EXPECT_EQ(b.order, a.order);
    ASSERT_EQ(b.tensors.size(), a.tensors.size());
    for (const auto& [name, entry] : a.tensors) {
        ASSERT_TRUE(b.has(name)) << name;
        EXPECT_EQ(b.shape(name), entry.first) << name;
        EXPECT_EQ(b.values(name), entry.second) << name;  // exact float bits
    }
    // moments and buffers are present under their documented names
    EXPECT_TRUE(a.has("state.prototypes"));
    EXPECT_TRUE(a.has("state.center"));
    EXPECT_TRUE(a.has("buffer.b_in"));
    EXPECT_TRUE(a.has("buffer.b_lg"));
    EXPECT_TRUE(a.has("buffer.b_lg_neg"));
    EXPECT_TRUE(a.has("adamw.m.state.prototypes"));
    EXPECT_TRUE(a.has("adamw.v.state.prototypes"));
    EXPECT_EQ(a.shape("buffer.b_in"), (Shape{4, 8}));  // two steps of batch 2, d_out 8
    fs::remove(path);
}

TEST(Checkpoint, TruncatedPayloadNamesTheTensor) {
    Trainer t(tiny_config());
    t.attach_dataset(tiny_dataset());
    t.train_step({0, 1});
    const std::string path = temp_path("mugs_ckpt_trunc.mgck");
    save_checkpoint(t.to_checkpoint(), path);
    fs::resize_file(path, fs::file_size(path) - 64);
    try {
        load_checkpoint(path);
        FAIL() << "expected Error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("tensor '"), std::string::npos) << e.what();
    }
    fs::remove(path);
}

TEST(Checkpoint, BadMagicAndVersionRejected) {
    const std::string path = temp_path("mugs_ckpt_magic.mgck");
    {
        std::ofstream os(path, std::ios::binary);
        os << "NOPE then some bytes";
    }
    EXPECT_THROW(load_checkpoint(path), Error);
    fs::remove(path);
}

TEST(Checkpoint, ShapeMismatchNamesFirstOffender) {
    Trainer t(tiny_config());
    t.attach_dataset(tiny_dataset());
    CheckpointData ckpt = t.to_checkpoint();
    TrainConfig wider = tiny_config();
    wider.embed_dim = 32;  // valid config, but incompatible with stored tensors
    Trainer other(wider);
    try {
        other.restore(ckpt);
        FAIL() << "expected Error";
    } catch (const Error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("shape mismatch for '"), std::string::npos) << msg;
        EXPECT_NE(msg.find("file has"), std::string::npos) << msg;
    }
}

// ---------------------------------------------------------------------------
// resume
// ---------------------------------------------------------------------------

TEST(Resume, ContinuationMatchesUninterruptedRunBitwise) {
    TrainConfig cfg = tiny_config();  // 16 images / batch 8 -> 2 steps/epoch, 4 total
    Dataset ds = tiny_dataset();

    // reference: straight through
    cfg.out_dir = temp_path("mugs_resume_ref");
    Trainer ref(cfg);
    ref.attach_dataset(ds);
    ref.run(nullptr);
    ASSERT_EQ(ref.step(), 4);

    // interrupted: epoch 0 by hand, checkpoint to disk, reload, finish
    cfg.out_dir = temp_path("mugs_resume_cont");
    Trainer part(cfg);
    part.attach_dataset(ds);
    std::vector<int64_t> order = part.epoch_order(0);
    part.train_step({order.begin(), order.begin() + 8});
    part.train_step({order.begin() + 8, order.end()});
    const std::string path = temp_path("mugs_resume.mgck");
    save_checkpoint(part.to_checkpoint(), path);

    Trainer cont = Trainer::from_checkpoint(load_checkpoint(path));
    ASSERT_EQ(cont.step(), 2);
    cont.attach_dataset(ds);
    cont.run(nullptr);
    ASSERT_EQ(cont.step(), 4);

    EXPECT_EQ(store_values(cont.optimized_params()), store_values(ref.optimized_params()));
    EXPECT_EQ(store_values(cont.pair().teacher_params()),
              store_values(ref.pair().teacher_params()));
    EXPECT_EQ(cont.state().center.data(), ref.state().center.data());
    EXPECT_EQ(cont.state().b_in.rows_oldest_first(), ref.state().b_in.rows_oldest_first());
    EXPECT_EQ(cont.state().b_lg.rows_oldest_first(), ref.state().b_lg.rows_oldest_first());
    EXPECT_EQ(cont.state().b_lg_neg.rows_oldest_first(),
              ref.state().b_lg_neg.rows_oldest_first());
    EXPECT_EQ(cont.optimizer().step_count(), ref.optimizer().step_count());

    fs::remove(path);
    fs::remove_all(temp_path("mugs_resume_ref"));
    fs::remove_all(temp_path("mugs_resume_cont"));
}

// ---------------------------------------------------------------------------
// metrics file
// ---------------------------------------------------------------------------

TEST(Metrics, AppendModeKeepsSingleHeader) {
    const std::string path = temp_path("mugs_metrics_append.csv");
    fs::remove(path);
    StepMetrics m;
    m.loss_total = 1.25f;
    {
        MetricsWriter w(path);
        w.write(m);
        m.step = 1;
        w.write(m);
    }
    {
        MetricsWriter w(path, /*append=*/true);
        m.step = 2;
        w.write(m);
    }
    std::ifstream in(path);
    std::string line;
    int headers = 0, rows = 0;
    while (std::getline(in, line)) {
        if (line.rfind("step,", 0) == 0) ++headers;
        else if (!line.empty()) ++rows;
    }
    EXPECT_EQ(headers, 1);
    EXPECT_EQ(rows, 3);
    fs::remove(path);
}

TEST(Metrics, ValuesSurviveRoundTripThroughText) {
    const std::string path = temp_path("mugs_metrics_precision.csv");
    StepMetrics m;
    m.step = 7;
    m.epoch = 3;
    m.loss_total = 1.2345678f;
    m.lr = 2.5e-5f;
    m.grad_norm = 123.4567f;
    {
        MetricsWriter w(path);
        w.write(m);
    }
    std::ifstream in(path);
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    std::stringstream ss(row);
    std::vector<std::string> fields;
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    ASSERT_EQ(fields.size(), 10u);
    EXPECT_EQ(fields[0], "7");
    EXPECT_EQ(fields[1], "3");
    // %.9g prints enough digits that parsing back recovers the exact float
    EXPECT_EQ(std::stof(fields[2]), m.loss_total);
    EXPECT_EQ(std::stof(fields[6]), m.lr);
    EXPECT_EQ(std::stof(fields[9]), m.grad_norm);
    fs::remove(path);
}

}  // namespace
