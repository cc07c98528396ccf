#include <gtest/gtest.h>

#include <thread>

#include "layerforge/manifest.hpp"
#include "layerforge/service.hpp"
#include "layerforge/train.hpp"
#include "support.hpp"

using namespace layerforge;

namespace {

FlowModel tiny_model() {
    ModelConfig c;
    c.d_model = 32;
    c.n_heads = 2;
    c.head_dim = 16;
    c.n_blocks = 1;
    c.time_dim = 16;
    return {init_weights<float>(c, 1), init_lora<float>(c, 0, 0)};
}

LayeredCanvas sample_canvas(std::uint64_t seed) {
    Rng rng = make_rng(seed);
    auto c = lftest::random_canvas(rng, 16, 16, 4);
    c.prompt = {"green", "trio"};
    return c;
}

bool has_exactly_one_of_error_or_payload(const nlohmann::json& body) {
    const bool err = body.contains("error");
    return err ? body.size() == 1 || (body.size() == 2 && body.contains("violations")) : !body.empty();
}

}  // namespace

TEST(Service, HealthReportsModel) {
    Service s(tiny_model());
    const auto r = s.health();
    EXPECT_EQ(r.status, 200);
    EXPECT_EQ(r.body["status"], "ok");
    EXPECT_EQ(r.body["model"]["d_model"], 32);
}

TEST(Service, ValidateDuplicateZOrderListsBothIds) {
    Service s(tiny_model());
    auto c = sample_canvas(1);
    c.layers.push_back({"dup_a", make_rgba(16, 16), false, 50, {}});
    c.layers.push_back({"dup_b", make_rgba(16, 16), true, 50, {}});
    const auto r = s.validate(serialize_manifest(c));
    EXPECT_EQ(r.status, 400);
    ASSERT_TRUE(r.body.contains("error"));
    const auto& v = r.body["violations"].at(0);
    EXPECT_EQ(v["kind"], "duplicate_z_order");
    EXPECT_EQ(v["layer_ids"], nlohmann::json({"dup_a", "dup_b"}));
    EXPECT_TRUE(has_exactly_one_of_error_or_payload(r.body));

    const auto ok = s.validate(serialize_manifest(sample_canvas(2)));
    EXPECT_EQ(ok.status, 200);
    EXPECT_FALSE(ok.body.contains("error"));
}

TEST(Service, ClientErrorsAre400WithJson) {
    Service s(tiny_model());
    for (const std::string body : {"not json", "{}", "{\"canvas\": 3}", "[1,2]"}) {
        const auto r = s.generate(body);
        EXPECT_EQ(r.status, 400) << body;
        EXPECT_TRUE(r.body.contains("error"));
        EXPECT_TRUE(has_exactly_one_of_error_or_payload(r.body));
    }
    EXPECT_EQ(s.validate("{\"version\":\"7\"}").status, 400);
    EXPECT_EQ(s.collage("garbage").status, 400);
    auto c = sample_canvas(3);
    c.prompt.background_hue = "plaid";
    const auto r = s.generate(nlohmann::json{{"canvas", manifest_json(c)}, {"steps", 1}}.dump());
    EXPECT_EQ(r.status, 400);
}

TEST(Service, CollageMatchesLibrary) {
    Service s(tiny_model());
    const auto c = sample_canvas(4);
    const auto r = s.collage(serialize_manifest(c));
    ASSERT_EQ(r.status, 200);
    EXPECT_EQ(image_from_png_base64(r.body["png"].get<std::string>(), 3), compose_collage(c));
}

TEST(Service, GenerateDeterministicAndCountsConsistent) {
    Service s(tiny_model());
    const auto c = sample_canvas(5);
    const std::string req = nlohmann::json{{"canvas", manifest_json(c)}, {"steps", 2}, {"seed", 11}}.dump();
    const auto a = s.generate(req), b = s.generate(req);
    ASSERT_EQ(a.status, 200) << a.body.dump();
    EXPECT_EQ(a.body["png"], b.body["png"]);
    std::size_t sum = 0;
    for (const auto& l : a.body["layers"]) sum += l["tokens"].get<std::size_t>();
    EXPECT_EQ(sum, a.body["condition_tokens"].get<std::size_t>());
    ConditionSummary oracle;
    build_condition_sequence(c, 4, &oracle);
    EXPECT_EQ(a.body["condition_tokens"].get<std::size_t>(), oracle.total);
    EXPECT_FALSE(a.body.contains("error"));
}

TEST(Service, LiveHttpRoundTrip) {
    Service service(tiny_model());
    httplib::Server server;
    mount(server, service);
    const int port = server.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    httplib::Client cli("127.0.0.1", port);
    auto health = cli.Get("/health");
    ASSERT_TRUE(health);
    EXPECT_EQ(health->status, 200);
    EXPECT_EQ(nlohmann::json::parse(health->body)["status"], "ok");
    EXPECT_EQ(health->get_header_value("Access-Control-Allow-Origin"), "*");

    const auto c = sample_canvas(6);
    auto valid = cli.Post("/canvas/validate", serialize_manifest(c), "application/json");
    ASSERT_TRUE(valid);
    EXPECT_EQ(valid->status, 200);

    const std::string req = nlohmann::json{{"canvas", manifest_json(c)}, {"steps", 1}, {"seed", 3}}.dump();
    auto g1 = cli.Post("/generate", req, "application/json");
    auto g2 = cli.Post("/generate", req, "application/json");
    ASSERT_TRUE(g1 && g2);
    EXPECT_EQ(g1->status, 200);
    EXPECT_EQ(nlohmann::json::parse(g1->body)["png"], nlohmann::json::parse(g2->body)["png"]);

    auto bad = cli.Post("/generate", "{", "application/json");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 400);
    EXPECT_TRUE(nlohmann::json::parse(bad->body).contains("error"));

    const std::string huge(kMaxPayloadBytes + 16, ' ');
    auto big = cli.Post("/canvas/validate", huge, "application/json");
    ASSERT_TRUE(big);
    EXPECT_EQ(big->status, 413);
    EXPECT_TRUE(nlohmann::json::parse(big->body).contains("error"));

    auto missing = cli.Get("/nope");
    ASSERT_TRUE(missing);
    EXPECT_EQ(missing->status, 404);
    EXPECT_TRUE(nlohmann::json::parse(missing->body).contains("error"));

    server.stop();
    th.join();
}
