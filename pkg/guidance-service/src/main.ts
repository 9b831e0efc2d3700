import { createServer } from "./server";

const port = Number(process.env.PORT ?? 8750);
const server = createServer();
server.listen(port, () => {
    console.log(`guidance-service listening on :${port}`);
});
