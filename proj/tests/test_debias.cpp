#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "oracles.hpp"
#include "scmbias/debias.hpp"
#include "scmbias/report.hpp"
#include "scmbias/toy_encoder.hpp"
#include "toy_problem.hpp"

using namespace scmbias;

namespace {

// AttributeDirections assembled directly from explicit vectors.
AttributeDirections directions_from(const std::string& dim,
                                    const std::vector<std::vector<Eigen::VectorXd>>& per_attr_layers) {
    AttributeDirections dirs;
    AttributeDirections::DimensionBlock block;
    block.dimension = dim;
    const std::size_t n_layers = per_attr_layers.front().size();
    const Eigen::Index hidden = per_attr_layers.front().front().size();
    for (std::size_t a = 0; a < per_attr_layers.size(); ++a)
        block.attribute_surfaces.push_back("a" + std::to_string(a));
    for (std::size_t l = 0; l < n_layers; ++l) {
        Eigen::MatrixXd m(static_cast<Eigen::Index>(per_attr_layers.size()), hidden);
        for (std::size_t a = 0; a < per_attr_layers.size(); ++a)
            m.row(static_cast<Eigen::Index>(a)) = per_attr_layers[a][l].transpose();
        block.per_layer.push_back(m);
    }
    dirs.add_block(std::move(block));
    return dirs;
}

StimulusEmbedding embedding_of(std::initializer_list<std::vector<double>> layers) {
    StimulusEmbedding e;
    e.stimulus = make_term("t", TermKind::target, "g");
    for (const auto& l : layers) {
        Eigen::VectorXd v(static_cast<Eigen::Index>(l.size()));
        for (std::size_t i = 0; i < l.size(); ++i) v[static_cast<Eigen::Index>(i)] = l[i];
        e.per_layer.push_back(v);
    }
    return e;
}

}  // namespace

TEST_CASE("debias config invariants and defaults") {
    DebiasConfig c;
    CHECK(c.alpha == 0.2);
    CHECK(c.beta == 0.8);
    CHECK(c.learning_rate == 5e-5);
    CHECK(c.batch_size == 32);
    CHECK(c.epochs == 3);
    CHECK(c.dimensions == std::vector<std::string>{"warmth", "competence"});
    CHECK_NOTHROW(c.validate());

    SECTION("alpha and beta must sum to 1") {
        c.alpha = 0.3;
        CHECK_THROWS_AS(c.validate(), ValidationError);
    }
    SECTION("weights must lie in [0,1]") {
        c.alpha = -0.2;
        c.beta = 1.2;
        CHECK_THROWS_AS(c.validate(), ValidationError);
    }
    SECTION("learning rate must be positive") {
        c.learning_rate = 0.0;
        CHECK_THROWS_AS(c.validate(), ValidationError);
    }
    SECTION("json round-trip") {
        c.layers = {1, 2};
        c.seed = 9;
        auto parsed = DebiasConfig::from_json(c.to_json());
        CHECK(parsed.to_json() == c.to_json());
    }
}

TEST_CASE("projection_loss basics") {
    SECTION("orthogonal embeddings give zero") {
        auto dirs = directions_from("warmth", {{Eigen::VectorXd{{1.0, 0.0}}}});
        auto e = embedding_of({{0.0, 1.0}});
        auto loss = projection_loss({e}, dirs, {1});
        CHECK(loss.total == 0.0);
    }
    SECTION("unit inner product squares to one") {
        auto dirs = directions_from("warmth", {{Eigen::VectorXd{{1.0, 0.0}}}});
        auto e = embedding_of({{1.0, 0.0}});
        auto loss = projection_loss({e}, dirs, {1});
        CHECK(loss.total == 1.0);
    }
    SECTION("dimension mismatch is a shape error") {
        auto dirs = directions_from("warmth", {{Eigen::VectorXd{{1.0, 0.0, 0.0}}}});
        auto e = embedding_of({{1.0, 0.0}});
        CHECK_THROWS_AS(projection_loss({e}, dirs, {1}), ValidationError);
    }
}

TEST_CASE("projection_loss equals the definitional quadruple loop") {
    Rng rng(606);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n_layers = 3, hidden = 5;
        const std::size_t n_dims = 2, n_attrs = 4, n_embs = 1 + rng.next_below(8);

        auto rand_vec = [&] {
            Eigen::VectorXd v(static_cast<Eigen::Index>(hidden));
            for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.next_normal();
            return v;
        };

        AttributeDirections dirs;
        std::vector<std::vector<std::vector<oracle::Vec>>> oracle_dirs;  // [d][a][layer]
        for (std::size_t d = 0; d < n_dims; ++d) {
            AttributeDirections::DimensionBlock block;
            block.dimension = "dim" + std::to_string(d);
            std::vector<std::vector<oracle::Vec>> dim_attrs;
            std::vector<std::vector<Eigen::VectorXd>> attr_layers(n_attrs);
            for (std::size_t a = 0; a < n_attrs; ++a) {
                block.attribute_surfaces.push_back("a" + std::to_string(a));
                for (std::size_t l = 0; l < n_layers; ++l) attr_layers[a].push_back(rand_vec());
                std::vector<oracle::Vec> layers;
                for (const auto& v : attr_layers[a])
                    layers.emplace_back(v.data(), v.data() + v.size());
                dim_attrs.push_back(layers);
            }
            for (std::size_t l = 0; l < n_layers; ++l) {
                Eigen::MatrixXd m(static_cast<Eigen::Index>(n_attrs), static_cast<Eigen::Index>(hidden));
                for (std::size_t a = 0; a < n_attrs; ++a)
                    m.row(static_cast<Eigen::Index>(a)) = attr_layers[a][l].transpose();
                block.per_layer.push_back(m);
            }
            oracle_dirs.push_back(dim_attrs);
            dirs.add_block(std::move(block));
        }

        std::vector<StimulusEmbedding> embs;
        std::vector<std::vector<std::vector<oracle::Vec>>> oracle_embs;  // [t][x][layer] (one x each)
        for (std::size_t e = 0; e < n_embs; ++e) {
            StimulusEmbedding emb;
            emb.stimulus = make_term("t" + std::to_string(e), TermKind::target, "g");
            std::vector<oracle::Vec> layers;
            for (std::size_t l = 0; l < n_layers; ++l) {
                auto v = rand_vec();
                emb.per_layer.push_back(v);
                layers.emplace_back(v.data(), v.data() + v.size());
            }
            embs.push_back(emb);
            oracle_embs.push_back({layers});
        }

        auto got = projection_loss(embs, dirs, {1, 2, 3});
        double want = oracle::projection_loss(oracle_embs, oracle_dirs, {0, 1, 2});
        CHECK(std::abs(got.total - want) < 1e-10);

        // layer selection restricts the sum
        auto partial = projection_loss(embs, dirs, {2});
        double want_partial = oracle::projection_loss(oracle_embs, oracle_dirs, {1});
        CHECK(std::abs(partial.total - want_partial) < 1e-10);
    }
}

TEST_CASE("regularization_loss basics") {
    ToyEncoderConfig cfg;
    cfg.seed = 5;
    cfg.n_layers = 2;
    cfg.hidden_dim = 8;
    ToyEncoder current(cfg);

    SECTION("identical parameters give exactly zero") {
        auto ref = current.clone();
        CHECK(regularization_loss(current, *ref, {"a warm day", "cold night air"}) == 0.0);
    }
    SECTION("a pure bias shift of delta adds |pieces| * delta^2 per layer") {
        auto ref = current.clone();
        // shift layer-2 bias by (1,0,...,0): every piece's layer-2 output moves by 1
        auto snap = current.snapshot();
        const std::size_t h = 8, w_params = h * h;
        snap.values[(w_params + h) + w_params] += 1.0;  // layer 2 bias, coordinate 0
        current.restore(snap);
        CHECK(regularization_loss(current, *ref, {"alone"}) == Catch::Approx(1.0).epsilon(1e-12));
        double loss = regularization_loss(current, *ref, {"one two three"});
        CHECK(loss == Catch::Approx(3.0).epsilon(1e-12));  // 3 pieces, one layer moved
    }
    SECTION("architecture mismatch is a configuration error") {
        ToyEncoderConfig other = cfg;
        other.hidden_dim = 10;
        ToyEncoder mismatch(other);
        CHECK_THROWS_AS(regularization_loss(current, mismatch, {"x"}), ValidationError);
    }
}

TEST_CASE("regularization_loss equals the definitional triple loop") {
    ToyEncoderConfig cfg;
    cfg.seed = 55;
    cfg.n_layers = 3;
    cfg.hidden_dim = 6;
    ToyEncoder current(cfg);
    auto reference = current.clone();

    // random perturbation of every parameter
    Rng rng(77);
    auto snap = current.snapshot();
    for (auto& v : snap.values) v += 0.05 * rng.next_normal();
    current.restore(snap);

    std::vector<std::string> sentences = {"a warm day", "Keisha met Adam", "the cold wind howled"};
    double got = regularization_loss(current, *reference, sentences);

    std::vector<std::vector<std::vector<oracle::Vec>>> cur, ref;  // [x][layer][piece]
    for (const auto& text : sentences) {
        auto cl = current.encode(text);
        auto rl = reference->encode(text);
        std::vector<std::vector<oracle::Vec>> cx, rx;
        for (std::size_t l = 0; l < cl.size(); ++l) {
            std::vector<oracle::Vec> cp, rp;
            for (Eigen::Index p = 0; p < cl[l].rows(); ++p) {
                Eigen::VectorXd cv = cl[l].row(p).transpose();
                Eigen::VectorXd rv = rl[l].row(p).transpose();
                cp.emplace_back(cv.data(), cv.data() + cv.size());
                rp.emplace_back(rv.data(), rv.data() + rv.size());
            }
            cx.push_back(cp);
            rx.push_back(rp);
        }
        cur.push_back(cx);
        ref.push_back(rx);
    }
    double want = oracle::regularization_loss(cur, ref);
    CHECK(std::abs(got - want) < 1e-10);
}

TEST_CASE("total_loss is the exact weighted sum") {
    DebiasConfig c;
    CHECK(total_loss(0.0, 0.0, c) == 0.0);
    CHECK(total_loss(1.0, 1.0, c) == Catch::Approx(1.0).epsilon(1e-15));  // 0.2 + 0.8
    CHECK(total_loss(2.0, 0.5, c) == Catch::Approx(0.8).epsilon(1e-15));  // 0.2*2 + 0.8*0.5
}

TEST_CASE("train with zero epochs changes nothing and logs nothing") {
    auto p = toy::make_problem();
    p.debias_config.epochs = 0;
    ToyEncoder enc(p.encoder_config);
    auto before = enc.snapshot();
    auto dirs = attribute_directions(enc, p.attribute_pool, p.lexicon.attribute_dimensions);
    auto log = train(enc, p.target_pool, p.attribute_pool, dirs, p.debias_config);
    CHECK(enc.snapshot() == before);
    CHECK(log.steps.empty());
    CHECK(log.epochs.empty());
}

TEST_CASE("training reduces the projection loss on the planted problem") {
    auto p = toy::make_problem();
    p.debias_config.epochs = 40;  // enough to show the trend at unit-test cost
    ToyEncoder enc(p.encoder_config);
    auto dirs = attribute_directions(enc, p.attribute_pool, p.lexicon.attribute_dimensions);
    auto pre_snapshot = enc.snapshot();
    auto log = train(enc, p.target_pool, p.attribute_pool, dirs, p.debias_config);

    REQUIRE(log.epochs.size() == 40);
    CHECK(log.epochs.back().mean_projection < log.epochs.front().mean_projection);

    SECTION("every logged step satisfies L = alpha*L_i + beta*L_reg") {
        for (const auto& s : log.steps) {
            double expect = p.debias_config.alpha * s.loss_projection +
                            p.debias_config.beta * s.loss_regularization;
            CHECK(s.loss_total == Catch::Approx(expect).epsilon(1e-12));
        }
    }
    SECTION("training is deterministic for a fixed seed") {
        ToyEncoder enc2(p.encoder_config);
        auto log2 = train(enc2, p.target_pool, p.attribute_pool, dirs, p.debias_config);
        CHECK(enc2.snapshot() == enc.snapshot());
        REQUIRE(log2.steps.size() == log.steps.size());
        CHECK(log2.steps.back().loss_total == log.steps.back().loss_total);
    }
    SECTION("the pre-training snapshot is never mutated") {
        CHECK(pre_snapshot.values == ParameterSnapshot(pre_snapshot).values);
        ToyEncoder ref(p.encoder_config);
        CHECK(ref.snapshot() == pre_snapshot);
    }
}

TEST_CASE("training gradient matches finite differences of the public losses") {
    // a single optimization step with full-pool batches exposes train()'s
    // internal gradient of L = alpha*L_i + beta*L_reg exactly
    auto p = toy::make_problem();
    p.encoder_config.hidden_dim = 8;
    p.encoder_config.n_layers = 2;
    ToyEncoderConfig cfg = p.encoder_config;

    // shrink the pools so the finite-difference sweep stays fast
    SentencePool targets, attributes;
    int taken = 0;
    for (const auto& [surface, records] : p.target_pool.entries) {
        if (taken++ >= 4) break;
        targets.entries[surface] = {records[0], records[1]};
    }
    taken = 0;
    for (const auto& [surface, records] : p.attribute_pool.entries) {
        if (taken++ >= 4) break;
        attributes.entries[surface] = {records[0], records[1]};
    }
    // restrict dimensions to attributes present in the shrunken pool
    std::vector<AttributeDimension> dims;
    for (auto dim : p.lexicon.attribute_dimensions) {
        AttributeDimension kept;
        kept.name = dim.name;
        for (const auto& t : dim.pole_high)
            if (attributes.entries.count(t.surface)) kept.pole_high.push_back(t);
        for (const auto& t : dim.pole_low)
            if (attributes.entries.count(t.surface)) kept.pole_low.push_back(t);
        if (!kept.pole_high.empty() && !kept.pole_low.empty()) dims.push_back(kept);
    }
    REQUIRE_FALSE(dims.empty());

    DebiasConfig config;
    config.batch_size = 1000;  // one batch covers each pool: exactly one step
    config.epochs = 1;
    config.learning_rate = 1.0;  // theta_after = theta - g
    config.seed = 3;
    config.dimensions.clear();
    for (const auto& d : dims) config.dimensions.push_back(d.name);

    ToyEncoder enc(cfg);
    auto theta = enc.snapshot();
    auto dirs = attribute_directions(enc, attributes, dims);

    auto loss_at = [&](const ParameterSnapshot& snap) {
        ToyEncoder e(cfg);
        e.restore(snap);
        ToyEncoder ref(cfg);
        ref.restore(theta);
        std::vector<StimulusEmbedding> embs;
        for (const auto& [surface, records] : targets.entries)
            for (const auto& rec : records) embs.push_back(embed_stimulus(e, rec));
        std::vector<int> all_layers;
        for (int i = 1; i <= cfg.n_layers; ++i) all_layers.push_back(i);
        double li = projection_loss(embs, dirs, all_layers).total;
        std::vector<std::string> sentences;
        for (const auto& [surface, records] : attributes.entries)
            for (const auto& rec : records) sentences.push_back(rec.text);
        double lreg = regularization_loss(e, ref, sentences);
        return config.alpha * li + config.beta * lreg;
    };

    ToyEncoder trained(cfg);
    train(trained, targets, attributes, dirs, config);
    auto theta_after = trained.snapshot();
    std::vector<double> analytic(theta.values.size());
    for (std::size_t i = 0; i < theta.values.size(); ++i)
        analytic[i] = theta.values[i] - theta_after.values[i];  // lr = 1

    Rng rng(121);
    const double eps = 1e-5;
    double max_rel = 0.0;
    for (int probe = 0; probe < 20; ++probe) {
        std::size_t i = static_cast<std::size_t>(rng.next_below(theta.values.size()));
        auto plus = theta, minus = theta;
        plus.values[i] += eps;
        minus.values[i] -= eps;
        double fd = (loss_at(plus) - loss_at(minus)) / (2.0 * eps);
        double rel = std::abs(analytic[i] - fd) / std::max({std::abs(analytic[i]), std::abs(fd), 1e-6});
        max_rel = std::max(max_rel, rel);
    }
    CHECK(max_rel < 1e-4);
}

TEST_CASE("orthogonal fixed point: zero gradient at theta_pre with orthogonal directions") {
    ToyEncoderConfig cfg;
    cfg.seed = 31;
    cfg.n_layers = 2;
    cfg.hidden_dim = 12;
    ToyEncoder enc(cfg);

    StimulusTerm term = make_term("Keisha", TermKind::target, "X");
    std::string text = "Keisha stayed late";
    auto spans = find_occurrences(text, term);
    SentenceRecord rec;
    rec.text = text;
    rec.stimulus = term;
    rec.span_begin = spans[0].first;
    rec.span_end = spans[0].second;
    rec.token_count = 3;
    rec.source_id = "t:1:1";
    SentencePool targets;
    targets.entries[term.surface] = {rec};

    // directions orthogonal to the target embedding at every layer
    auto emb = embed_stimulus(enc, rec);
    AttributeDirections dirs;
    AttributeDirections::DimensionBlock block;
    block.dimension = "warmth";
    block.attribute_surfaces = {"a0", "a1"};
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& e = emb.per_layer[static_cast<std::size_t>(l)];
        Eigen::MatrixXd basis = e.transpose();  // 1 x H
        Eigen::FullPivLU<Eigen::MatrixXd> lu(basis);
        Eigen::MatrixXd null_space = lu.kernel();  // H x (H-1)
        Eigen::MatrixXd m(2, cfg.hidden_dim);
        m.row(0) = null_space.col(0).transpose();
        m.row(1) = null_space.col(1).transpose();
        block.per_layer.push_back(m);
    }
    dirs.add_block(std::move(block));

    // attribute pool: theta_e == theta_pre makes the drift term exactly zero
    StimulusTerm attr = make_term("warm", TermKind::attribute, "warmth-high");
    std::string atext = "a warm day";
    auto aspans = find_occurrences(atext, attr);
    SentenceRecord arec;
    arec.text = atext;
    arec.stimulus = attr;
    arec.span_begin = aspans[0].first;
    arec.span_end = aspans[0].second;
    arec.token_count = 3;
    arec.source_id = "t:1:2";
    SentencePool attributes;
    attributes.entries[attr.surface] = {arec};

    DebiasConfig config;
    config.epochs = 1;
    config.batch_size = 8;
    config.learning_rate = 0.5;
    config.dimensions = {"warmth"};

    auto before = enc.snapshot();
    train(enc, targets, attributes, dirs, config);
    auto after = enc.snapshot();
    double max_delta = 0.0;
    for (std::size_t i = 0; i < before.values.size(); ++i)
        max_delta = std::max(max_delta, std::abs(before.values[i] - after.values[i]));
    CHECK(max_delta < 1e-12);
}

TEST_CASE("non-finite loss aborts with a diagnostic naming the batch") {
    auto p = toy::make_problem();
    p.debias_config.epochs = 1;
    p.debias_config.learning_rate = 1e280;  // guarantees overflow on step 2
    ToyEncoder enc(p.encoder_config);
    auto dirs = attribute_directions(enc, p.attribute_pool, p.lexicon.attribute_dimensions);
    try {
        train(enc, p.target_pool, p.attribute_pool, dirs, p.debias_config);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
}

TEST_CASE("debiasing shrinks the projection-plot point cloud") {
    auto p = toy::make_problem();
    p.debias_config.epochs = 1200;  // partial run is enough to see the shrink
    ToyEncoder enc(p.encoder_config);
    auto dirs = attribute_directions(enc, p.attribute_pool, p.lexicon.attribute_dimensions);
    const int layer = enc.layer_count();

    auto cloud_spread = [&](const EncoderBackend& backend) {
        std::vector<StimulusEmbedding> embs;
        for (const auto& [surface, records] : p.target_pool.entries)
            for (const auto& rec : records) embs.push_back(embed_stimulus(backend, rec));
        auto pts = emit_projection_coordinates(embs, dirs, "warmth", "competence", layer);
        double mx = 0.0, my = 0.0;
        for (const auto& pt : pts) {
            mx += std::abs(pt.x);
            my += std::abs(pt.y);
        }
        return std::pair{mx / static_cast<double>(pts.size()), my / static_cast<double>(pts.size())};
    };

    auto pre = cloud_spread(enc);
    train(enc, p.target_pool, p.attribute_pool, dirs, p.debias_config);
    auto post = cloud_spread(enc);
    CHECK(post.first < pre.first);
    CHECK(post.second < pre.second);
}

TEST_CASE("export_checkpoint after training reloads bit-identically") {
    auto p = toy::make_problem();
    p.debias_config.epochs = 5;
    ToyEncoder enc(p.encoder_config);
    auto dirs = attribute_directions(enc, p.attribute_pool, p.lexicon.attribute_dimensions);
    train(enc, p.target_pool, p.attribute_pool, dirs, p.debias_config);

    auto dir = std::filesystem::temp_directory_path() / "scmbias_debias_ckpt";
    std::filesystem::create_directories(dir);
    auto manifest = export_checkpoint(enc, dir.string());
    CHECK(manifest.backend_kind == "toy");
    auto reloaded = load_toy_checkpoint(dir.string());
    const std::string probe = "Keisha toasty quiet kitchen garden visit";
    auto a = enc.encode(probe);
    auto b = reloaded->encode(probe);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    std::filesystem::remove_all(dir);
}

TEST_CASE("training log serializes to json-lines") {
    auto p = toy::make_problem();
    p.debias_config.epochs = 2;
    ToyEncoder enc(p.encoder_config);
    auto dirs = attribute_directions(enc, p.attribute_pool, p.lexicon.attribute_dimensions);
    auto log = train(enc, p.target_pool, p.attribute_pool, dirs, p.debias_config);

    auto path = std::filesystem::temp_directory_path() / "scmbias_train_log.jsonl";
    write_training_log(log, path.string());
    std::ifstream in(path);
    std::string line;
    std::size_t step_lines = 0, epoch_lines = 0;
    REQUIRE(std::getline(in, line));  // header
    auto header = nlohmann::json::parse(line);
    CHECK(header.at("config_hash") == log.config_hash);
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        if (j.contains("step")) ++step_lines;
        if (j.contains("epoch")) ++epoch_lines;
    }
    CHECK(step_lines == log.steps.size());
    CHECK(epoch_lines == log.epochs.size());
    std::filesystem::remove(path);
}
