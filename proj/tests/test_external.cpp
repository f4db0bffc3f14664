#include <gtest/gtest.h>

#include "imctx/external.hpp"
#include "test_util.hpp"

using namespace imctx;

namespace {

ExternalPredictorConfig echo(const std::string& mode = "echo", double timeout = 10.0) {
    ExternalPredictorConfig c;
    c.command = IMCTX_ECHO;
    c.args = {"--mode", mode};
    c.timeout_s = timeout;
    return c;
}

Prompt prompt(double last) { return Prompt{{{1.0, 2.0}, {3.0, 4.0}}, {0.5, last}, {0.0, 1.0}}; }

std::string error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const RuntimeError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Protocol, RequestRoundTrip) {
    Prompt p{{{1.5, -2.0}, {0.1, 1e-300}}, {3.25, -7.0}, {9.0, 8.0}};
    auto q = decode_request(encode_request(p));
    EXPECT_EQ(q.xs, p.xs);
    EXPECT_EQ(q.ys, p.ys);
    EXPECT_EQ(q.query, p.query);
    EXPECT_DOUBLE_EQ(decode_response(encode_response(0.1), 1), 0.1);
}

TEST(Protocol, BadResponsesNameTheLine) {
    auto e = error_of([] { decode_response("nope", 7); });
    EXPECT_NE(e.find("line 7"), std::string::npos) << e;
    EXPECT_THROW(decode_response(R"({"prediction":"x"})", 1), RuntimeError);
    EXPECT_THROW(decode_response(R"({"value":1})", 1), RuntimeError);
    EXPECT_THROW(decode_response(R"([1])", 1), RuntimeError);
}

TEST(External, EchoReturnsLastLabel) {
    auto out = external_predict(echo(), {prompt(4.5)});
    ASSERT_EQ(out.size(), 1u);
    EXPECT_DOUBLE_EQ(out[0].value, 4.5);
}

TEST(External, ResponsesStayInOrder) {
    auto out = external_predict(echo(), {prompt(1.0), prompt(2.0), prompt(3.0)});
    ASSERT_EQ(out.size(), 3u);
    for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(out[i].value, i + 1.0);
}

TEST(External, WidePromptsAreChunked) {
    auto c = echo("mean");
    c.input_dim = 1;
    ExternalPredictor child(c);
    auto out = child.predict({prompt(2.5)});
    child.finish();
    ASSERT_TRUE(out[0].per_chunk);
    EXPECT_EQ(out[0].per_chunk->size(), 2u);
    EXPECT_DOUBLE_EQ(out[0].value, 1.5);
}

TEST(External, NonNumericIsProtocolError) {
    auto e = error_of([] { external_predict(echo("nonnumeric"), {prompt(1.0)}); });
    EXPECT_NE(e.find("protocol error at response line 1"), std::string::npos) << e;
}

TEST(External, GarbageLineNamesSecondResponse) {
    auto e = error_of([] { external_predict(echo("garbage"), {prompt(1.0), prompt(2.0), prompt(3.0)}); });
    EXPECT_NE(e.find("line 2"), std::string::npos) << e;
}

TEST(External, TimeoutIsReported) {
    const auto t0 = std::chrono::steady_clock::now();
    auto e = error_of([] { external_predict(echo("sleep", 0.3), {prompt(1.0)}); });
    EXPECT_NE(e.find("timed out"), std::string::npos) << e;
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 5.0);
}

TEST(External, NonZeroExitCarriesStderr) {
    auto e = error_of([] { external_predict(echo("fail"), {prompt(1.0)}); });
    EXPECT_NE(e.find("exit code 4"), std::string::npos) << e;
    EXPECT_NE(e.find("simulated failure"), std::string::npos) << e;
}

TEST(External, MissingCommandFails) {
    ExternalPredictorConfig c;
    c.command = "/nonexistent/predictor";
    auto e = error_of([&] { external_predict(c, {prompt(1.0)}); });
    EXPECT_FALSE(e.empty());
}

TEST(ExternalConfig, LoadsAndValidates) {
    testutil::TempDir dir;
    write_file_atomic(dir / "ext.json", R"({"command": "x", "args": ["a"], "input_dim": 5})");
    auto c = ExternalPredictorConfig::load(dir / "ext.json");
    EXPECT_EQ(c.command, "x");
    EXPECT_EQ(c.input_dim, 5u);
    EXPECT_EQ(c.working_dir, dir.path());
    EXPECT_THROW(ExternalPredictorConfig::from_json({{"args", {"a"}}}), UsageError);
    EXPECT_THROW(ExternalPredictorConfig::from_json({{"command", "x"}, {"input_dim", 0}}), UsageError);
}
